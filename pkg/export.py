import os
import logging

import geojson
import numpy as np

from gmm import point_partition

logger = logging.getLogger(__name__)

ELLIPSE_VERTICES = 72


def _coords(lonlat):
    return [(float(lon), float(lat)) for lon, lat in np.asarray(lonlat).reshape(-1, 2)]


def trajectory_features(trajectories, labels=None):
    """Une LineString par trajectoire, propriété `label` = cluster (ou None)."""
    features = []
    for i, t in enumerate(trajectories):
        coords = _coords(t.lonlat)
        geometry = geojson.LineString(coords) if len(coords) > 1 else geojson.Point(coords[0])
        features.append(geojson.Feature(
            geometry=geometry,
            properties={
                "kind": "trajectory",
                "trip_id": t.id,
                "label": int(labels[i]) if labels is not None else None,
                "n_points": len(t),
            },
        ))
    return features


def ellipse_xy(mean, covariance, n_sigma=1.0, n_vertices=ELLIPSE_VERTICES):
    """Polygone fermé (plan) de l'ellipse {x : (x-μ)ᵀ Σ⁻¹ (x-μ) = n_sigma²}."""
    eigvals, eigvecs = np.linalg.eigh(np.asarray(covariance, dtype=float))
    theta = np.linspace(0.0, 2.0 * np.pi, n_vertices, endpoint=False)
    circle = np.column_stack([np.cos(theta), np.sin(theta)])
    ring = np.asarray(mean, dtype=float) + n_sigma * (circle * np.sqrt(np.maximum(eigvals, 0.0))) @ eigvecs.T
    return np.vstack([ring, ring[:1]])


def component_features(f, sigmas=(1.0, 2.0), n_vertices=ELLIPSE_VERTICES):
    """Ellipses à 1σ et 2σ de chaque composante gaussienne, en WGS84."""
    projection = f.projection
    features = []
    for m, cluster in enumerate(f.clusters, start=1):
        for k, component in enumerate(cluster.mixture.components, start=1):
            for n_sigma in sigmas:
                ring = projection.unproject_many(ellipse_xy(component.mean, component.covariance, n_sigma, n_vertices))
                features.append(geojson.Feature(
                    geometry=geojson.Polygon([_coords(ring)]),
                    properties={
                        "kind": "component",
                        "cluster": m,
                        "component": k,
                        "weight": float(component.weight),
                        "sigma": float(n_sigma),
                    },
                ))
    return features


def destination_features(f):
    """Destinations moyennes d^m."""
    lonlat = f.projection.unproject_many(f.destinations)
    return [
        geojson.Feature(
            geometry=geojson.Point(_coords(point)[0]),
            properties={"kind": "mean_destination", "cluster": m, "members": f.clusters[m - 1].member_count},
        )
        for m, point in enumerate(lonlat, start=1)
    ]


def prediction_features(results):
    """Deux points par prédiction (règles 1 et 2) avec les scores normalisés des meilleurs clusters."""
    features = []
    for r in results:
        scores = {str(m): float(s) for m, s in r.top_clusters}
        for rule, point in ((1, r.destination_1), (2, r.destination_2)):
            features.append(geojson.Feature(
                geometry=geojson.Point((point.lon, point.lat)),
                properties={
                    "kind": "prediction",
                    "trip_id": r.trip_id,
                    "completion": r.completion,
                    "rule": rule,
                    "scores": scores,
                },
            ))
    return features


def partition_features(trajectories, labels, f):
    """Points de chaque cluster regroupés par composante la plus probable (MultiPoint)."""
    labels = np.asarray(labels, dtype=int)
    features = []
    for m, cluster in enumerate(f.clusters, start=1):
        members = [t for t, label in zip(trajectories, labels) if label == m]
        if not members:
            continue
        xy = np.vstack([t.xy for t in members])
        lonlat = np.vstack([t.lonlat for t in members])
        groups = point_partition(xy, cluster.mixture)
        for k in range(1, cluster.mixture.k + 1):
            selected = lonlat[groups == k - 1]
            if len(selected) == 0:
                continue
            features.append(geojson.Feature(
                geometry=geojson.MultiPoint(_coords(selected)),
                properties={"kind": "partition", "cluster": m, "component": k, "n_points": int(len(selected))},
            ))
    return features


def build_collection(trajectories=(), labels=None, model=None, predictions=(), partition=False):
    features = trajectory_features(trajectories, labels)
    if model is not None:
        features += component_features(model) + destination_features(model)
        if partition and labels is not None:
            features += partition_features(trajectories, labels, model)
    features += prediction_features(predictions)
    return geojson.FeatureCollection(features)


def export_geojson(path, trajectories=(), labels=None, model=None, predictions=(), partition=False):
    """Écrit une FeatureCollection WGS84 ; sans objet en entrée, la collection est vide."""
    collection = build_collection(trajectories, labels, model, predictions, partition)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        geojson.dump(collection, fh, sort_keys=True)
        fh.write("\n")
    logger.info(f"GeoJSON écrit: {path} ({len(collection['features'])} objets)")
    return collection
