import json
import math
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from geometry import GeoPoint, prefix
from gmm import ClusterModel, FlowModel, GaussianComponent, MixtureModel, mixture_log_pdf
from utils import json_safe

logger = logging.getLogger(__name__)

FLAG_NAMES = ("emp", "weekday", "hour")
MODEL_FORMAT = "flowcast-flow-model"
MODEL_VERSION = 1


def parse_flags(value):
    """
    Normalise un jeu de poids auxiliaires : None, "", "none" -> ∅ ;
    "emp,hour" -> {emp, hour} ; "all" -> {emp, weekday, hour}.
    """
    if value is None:
        return frozenset()
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ("", "none", "-"):
            return frozenset()
        if text == "all":
            return frozenset(FLAG_NAMES)
        items = [v.strip() for v in text.replace("+", ",").split(",") if v.strip()]
    else:
        items = [str(v).strip().lower() for v in value]
    unknown = set(items) - set(FLAG_NAMES)
    if unknown:
        raise ValueError(f"Poids auxiliaire inconnu: {sorted(unknown)}")
    return frozenset(items)


def flags_label(flags):
    """Libellé stable d'un jeu de poids ("none", "emp", "emp+weekday+hour")."""
    return "+".join(f for f in FLAG_NAMES if f in flags) or "none"


@dataclass(frozen=True, eq=False)
class ScoreVector:
    log_scores: np.ndarray
    normalized: np.ndarray


@dataclass(frozen=True)
class PredictionResult:
    trip_id: str
    completion: float
    destination_1: GeoPoint
    destination_2: GeoPoint
    top_clusters: tuple


def auxiliary_weight(m, h, d, flags, f):
    """Produit des poids sélectionnés pour le cluster m (1..K), l'heure h et le jour d."""
    flags = parse_flags(flags)
    weight = 1.0
    if "emp" in flags:
        weight *= f.a_emp[m - 1]
    if "weekday" in flags:
        weight *= f.a_wd[d - 1, m - 1]
    if "hour" in flags:
        weight *= f.a_h[h, m - 1]
    return float(weight)


def simple_log_score(t, m):
    """log s^m(T) = Σ_j log Φ^m(p_j)."""
    return math.fsum(mixture_log_pdf(t.xy, m.mixture))


def complete_log_score(t, m, flags, f):
    """log s^m_c(T) = log α(m, h, d) + log s^m(T) ; m est l'indice 1..K du cluster."""
    flags = parse_flags(flags)
    score = simple_log_score(t, f.clusters[m - 1])
    if not flags:
        return score
    with np.errstate(divide="ignore"):
        return float(np.log(auxiliary_weight(m, t.start_hour, t.start_weekday, flags, f))) + score


def score_vector(log_scores):
    log_scores = np.asarray(log_scores, dtype=float)
    return ScoreVector(log_scores, np.exp(log_scores - logsumexp(log_scores)))


def classify(t, f, flags=None):
    """
    Affecte la trajectoire au cluster de score maximal.
    Retourne (l_guess, clusters classés par score décroissant, ScoreVector).
    """
    flags = parse_flags(flags)
    log_scores = [complete_log_score(t, m, flags, f) for m in range(1, f.K + 1)]
    scores = score_vector(log_scores)
    ranked = [int(i) + 1 for i in np.argsort(-scores.log_scores, kind="stable")]
    return ranked[0], ranked, scores


def _rule_1(f, l_guess):
    return f.projection.unproject_many(f.destinations[l_guess - 1])[0]


def _rule_2(f, scores):
    weights = scores.normalized / scores.normalized.sum()
    return f.projection.unproject_many(weights @ f.destinations)[0]


def predict_destination_1(t, f, flags=None):
    """Destination moyenne d^m du cluster le plus probable."""
    l_guess, _, _ = classify(t, f, flags)
    lon, lat = _rule_1(f, l_guess)
    return GeoPoint(float(lon), float(lat))


def predict_destination_2(t, f, flags=None):
    """Somme des d^m pondérée par les scores normalisés s_w^m."""
    _, _, scores = classify(t, f, flags)
    lon, lat = _rule_2(f, scores)
    return GeoPoint(float(lon), float(lat))


def predict(t, f, flags=None, completion=1.0, top=3):
    """Classe la p-trajectoire de t puis applique les deux règles de prédiction."""
    observed = prefix(t, completion)
    l_guess, ranked, scores = classify(observed, f, flags)
    lon1, lat1 = _rule_1(f, l_guess)
    lon2, lat2 = _rule_2(f, scores)
    return PredictionResult(
        trip_id=t.id,
        completion=float(completion),
        destination_1=GeoPoint(float(lon1), float(lat1)),
        destination_2=GeoPoint(float(lon2), float(lat2)),
        top_clusters=tuple((m, float(scores.normalized[m - 1])) for m in ranked[:top]),
    )


def prediction_trace(t, f, flags=None, completions=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0)):
    """Prédictions successives d'un même trajet à plusieurs niveaux de complétion."""
    return [predict(t, f, flags, p) for p in completions]


def predictions_to_frame(results, top=3):
    """Une ligne CSV par requête : id, p, lon/lat des deux règles, top-3 clusters."""
    rows = []
    for r in results:
        row = {
            "trip_id": r.trip_id,
            "completion": r.completion,
            "pred1_lon": r.destination_1.lon,
            "pred1_lat": r.destination_1.lat,
            "pred2_lon": r.destination_2.lon,
            "pred2_lat": r.destination_2.lat,
        }
        for rank in range(top):
            cluster, score = r.top_clusters[rank] if rank < len(r.top_clusters) else (None, None)
            row[f"top{rank + 1}_cluster"] = cluster
            row[f"top{rank + 1}_score"] = score
        rows.append(row)
    return pd.DataFrame(rows)


def save_flow_model(f, path):
    """Écrit le modèle au format texte versionné (JSON)."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "origin": {"lon": f.origin.lon, "lat": f.origin.lat},
        "K": f.K,
        "clusters": [
            {
                "m": m,
                "member_count": c.member_count,
                "mean_destination": c.mean_destination,
                "train_log_likelihood": c.mixture.train_log_likelihood,
                "n_train": c.mixture.n_train,
                "components": [
                    {"k": k, "weight": comp.weight, "mean": comp.mean, "covariance": comp.covariance}
                    for k, comp in enumerate(c.mixture.components, start=1)
                ],
            }
            for m, c in enumerate(f.clusters, start=1)
        ],
        "weights": {"emp": f.a_emp, "weekday": f.a_wd, "hour": f.a_h},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(json_safe(payload), fh, indent=1)
        fh.write("\n")
    logger.info(f"Modèle de flux écrit: {path} (K={f.K})")


def load_flow_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"Fichier de modèle invalide: {path}")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"Version de modèle non supportée: {payload.get('version')}")

    clusters = []
    for record in sorted(payload["clusters"], key=lambda r: r["m"]):
        components = tuple(
            GaussianComponent(c["weight"], c["mean"], c["covariance"])
            for c in sorted(record["components"], key=lambda c: c["k"])
        )
        mixture = MixtureModel(components, record["train_log_likelihood"], record["n_train"])
        clusters.append(ClusterModel(mixture, record["mean_destination"], record["member_count"]))
    if len(clusters) != payload["K"]:
        raise ValueError(f"Modèle incohérent: {len(clusters)} clusters pour K={payload['K']}")

    weights = payload["weights"]
    origin = GeoPoint(payload["origin"]["lon"], payload["origin"]["lat"])
    return FlowModel(tuple(clusters), weights["emp"], weights["weekday"], weights["hour"], origin)
