import math
import logging
from dataclasses import dataclass
from datetime import datetime

import numpy as np
from dateutil import tz

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
EARTH_RADIUS_KM = 6371.0

# Écart maximal (degrés) toléré entre un point et l'origine de projection
MAX_PROJECTION_SPAN_DEG = 1.0


@dataclass(frozen=True)
class GeoPoint:
    """Coordonnées WGS84 en degrés."""
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise ValueError(f"Coordonnées non finies: ({self.lon}, {self.lat})")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"Longitude hors bornes: {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"Latitude hors bornes: {self.lat}")


@dataclass(frozen=True)
class PlanarPoint:
    """Mètres à l'est (x) et au nord (y) de l'origine du jeu de données."""
    x: float
    y: float


@dataclass(frozen=True)
class Segment:
    a: PlanarPoint
    b: PlanarPoint


def check_lonlat(lonlat):
    lonlat = np.asarray(lonlat, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(lonlat)):
        raise ValueError("Coordonnées non finies")
    if np.any(np.abs(lonlat[:, 0]) > 180.0) or np.any(np.abs(lonlat[:, 1]) > 90.0):
        raise ValueError("Coordonnées hors bornes WGS84")
    return lonlat


@dataclass(frozen=True)
class Projection:
    """
    Projection équirectangulaire locale autour d'une origine :
    x = R·cos(lat0)·Δlon, y = R·Δlat (angles en radians, R = 6 371 km).
    """
    origin: GeoPoint

    @classmethod
    def centered_on(cls, lonlat):
        """Origine au centroïde des positions (lon, lat) fournies."""
        lonlat = check_lonlat(lonlat)
        if len(lonlat) == 0:
            raise ValueError("Impossible de centrer une projection sans point")
        lon, lat = lonlat.mean(axis=0)
        return cls(GeoPoint(float(lon), float(lat)))

    def project_many(self, lonlat):
        lonlat = check_lonlat(lonlat)
        delta = lonlat - np.array([self.origin.lon, self.origin.lat])
        if np.any(np.abs(delta) > MAX_PROJECTION_SPAN_DEG):
            raise ValueError(
                f"Point à plus de {MAX_PROJECTION_SPAN_DEG}° de l'origine "
                f"({self.origin.lon}, {self.origin.lat})"
            )
        cos_lat0 = math.cos(math.radians(self.origin.lat))
        xy = np.empty_like(delta)
        xy[:, 0] = EARTH_RADIUS_M * cos_lat0 * np.radians(delta[:, 0])
        xy[:, 1] = EARTH_RADIUS_M * np.radians(delta[:, 1])
        return xy

    def unproject_many(self, xy):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        cos_lat0 = math.cos(math.radians(self.origin.lat))
        lonlat = np.empty_like(xy)
        lonlat[:, 0] = self.origin.lon + np.degrees(xy[:, 0] / (EARTH_RADIUS_M * cos_lat0))
        lonlat[:, 1] = self.origin.lat + np.degrees(xy[:, 1] / EARTH_RADIUS_M)
        return lonlat

    def project(self, g):
        x, y = self.project_many([[g.lon, g.lat]])[0]
        return PlanarPoint(float(x), float(y))

    def unproject(self, p):
        lon, lat = self.unproject_many([[p.x, p.y]])[0]
        return GeoPoint(float(lon), float(lat))


def project(g, origin):
    """Projette un GeoPoint dans le plan local de l'origine."""
    return Projection(origin).project(g)


def unproject(p, origin):
    """Inverse exact de project()."""
    return Projection(origin).unproject(p)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Suite ordonnée de positions horodatées.

    xy : positions planes (n, 2) en mètres ; lonlat : positions d'origine (n, 2) ;
    times : secondes epoch, non décroissantes ; start_hour ∈ [0, 23] et
    start_weekday ∈ [1, 7] (lundi = 1) décrivent le départ du trajet.
    """
    id: str
    xy: np.ndarray
    times: np.ndarray
    lonlat: np.ndarray
    start_hour: int = 0
    start_weekday: int = 1

    def __post_init__(self):
        xy = np.array(self.xy, dtype=float).reshape(-1, 2)
        times = np.array(self.times, dtype=float).reshape(-1)
        lonlat = np.array(self.lonlat, dtype=float).reshape(-1, 2)
        if len(xy) == 0:
            raise ValueError(f"Trajectoire {self.id} vide")
        if len(times) != len(xy) or len(lonlat) != len(xy):
            raise ValueError(f"Trajectoire {self.id}: tailles incohérentes")
        if not np.all(np.isfinite(xy)):
            raise ValueError(f"Trajectoire {self.id}: positions non finies")
        if np.any(np.diff(times) < 0):
            raise ValueError(f"Trajectoire {self.id}: horodatages décroissants")
        if not 0 <= int(self.start_hour) <= 23:
            raise ValueError(f"Heure de départ invalide: {self.start_hour}")
        if not 1 <= int(self.start_weekday) <= 7:
            raise ValueError(f"Jour de semaine invalide: {self.start_weekday}")
        for name, value in (("xy", xy), ("times", times), ("lonlat", lonlat)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_geo(cls, trip_id, lonlat, times, projection, timezone="UTC"):
        """Construit une trajectoire à partir de positions WGS84 et d'horodatages epoch."""
        lonlat = check_lonlat(lonlat)
        times = np.asarray(times, dtype=float).reshape(-1)
        hour, weekday = start_context(times[0], timezone) if len(times) else (0, 1)
        return cls(
            id=str(trip_id),
            xy=projection.project_many(lonlat),
            times=times,
            lonlat=lonlat,
            start_hour=hour,
            start_weekday=weekday,
        )

    def __len__(self):
        return len(self.xy)

    @property
    def points(self):
        return [(PlanarPoint(float(x), float(y)), float(t)) for (x, y), t in zip(self.xy, self.times)]

    @property
    def geo_points(self):
        return [GeoPoint(float(lon), float(lat)) for lon, lat in self.lonlat]

    @property
    def final_xy(self):
        return self.xy[-1]

    @property
    def final_geo(self):
        lon, lat = self.lonlat[-1]
        return GeoPoint(float(lon), float(lat))

    @property
    def segment_lengths(self):
        return np.hypot(*np.diff(self.xy, axis=0).T) if len(self.xy) > 1 else np.zeros(0)

    @property
    def length_pl(self):
        """Longueur de la représentation linéaire par morceaux (mètres)."""
        return float(self.segment_lengths.sum())

    def segments(self):
        a, b = _segment_endpoints(self.xy)
        return [
            Segment(PlanarPoint(*map(float, pa)), PlanarPoint(*map(float, pb)))
            for pa, pb in zip(a, b)
        ]

    def head(self, count):
        """Les `count` premiers points, contexte de départ conservé."""
        if count >= len(self):
            return self
        return Trajectory(
            id=self.id,
            xy=self.xy[:count],
            times=self.times[:count],
            lonlat=self.lonlat[:count],
            start_hour=self.start_hour,
            start_weekday=self.start_weekday,
        )


def start_context(epoch, timezone="UTC"):
    """Heure (0-23) et jour ISO (1 = lundi … 7 = dimanche) d'un instant epoch."""
    zone = tz.gettz(timezone)
    if zone is None:
        raise ValueError(f"Fuseau horaire inconnu: {timezone}")
    moment = datetime.fromtimestamp(float(epoch), tz=zone)
    return moment.hour, moment.isoweekday()


def _segment_endpoints(xy):
    # Une trajectoire réduite à un point est traitée comme un segment dégénéré
    if len(xy) == 1:
        return xy, xy
    return xy[:-1], xy[1:]


def points_to_segments(points, a, b):
    """
    Matrice (m, s) des distances point-segment.

    Si le pied de la perpendiculaire tombe dans le segment, distance orthogonale ;
    sinon distance à l'extrémité la plus proche. Les segments de longueur nulle
    se ramènent à la distance à l'extrémité.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)

    abx, aby = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    denom = abx * abx + aby * aby
    apx = points[:, 0, None] - a[None, :, 0]
    apy = points[:, 1, None] - a[None, :, 1]
    bpx = points[:, 0, None] - b[None, :, 0]
    bpy = points[:, 1, None] - b[None, :, 1]

    with np.errstate(divide='ignore', invalid='ignore'):
        u = np.where(denom > 0, (apx * abx + apy * aby) / denom, 0.0)
    inside = (denom > 0) & (u >= 0.0) & (u <= 1.0)

    fx = apx - u * abx
    fy = apy - u * aby
    to_endpoint = np.minimum(apx * apx + apy * apy, bpx * bpx + bpy * bpy)
    # min() garantit d(p, s) <= distance aux extrémités malgré les arrondis
    return np.sqrt(np.where(inside, np.minimum(fx * fx + fy * fy, to_endpoint), to_endpoint))


def point_to_segment(p, s):
    return float(points_to_segments([[p.x, p.y]], [[s.a.x, s.a.y]], [[s.b.x, s.b.y]])[0, 0])


def point_to_trajectory(p, t):
    a, b = _segment_endpoints(t.xy)
    return float(points_to_segments([[p.x, p.y]], a, b).min())


def _mean(values):
    return math.fsum(values) / len(values)


def stack_segments(xys):
    """
    Concatène les segments de plusieurs trajectoires.
    Retourne (a, b, starts) où starts[j] est l'indice du premier segment de la j-ième.
    """
    ends = [_segment_endpoints(np.asarray(xy, dtype=float)) for xy in xys]
    counts = np.array([len(a) for a, _ in ends])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.vstack([a for a, _ in ends]), np.vstack([b for _, b in ends]), starts


def spd_to_many(xy, a, b, starts, block_size=2_000_000):
    """
    SPD orientées d'une trajectoire (points xy) vers toutes les trajectoires
    empilées par stack_segments. Les cibles sont traitées par blocs d'au plus
    block_size distances point-segment.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    bounds = np.append(starts, len(a))
    out = np.empty(len(starts))
    per_block = max(1, block_size // len(xy))
    j0 = 0
    while j0 < len(starts):
        j1 = j0 + 1
        while j1 < len(starts) and bounds[j1 + 1] - bounds[j0] <= per_block:
            j1 += 1
        s0, s1 = bounds[j0], bounds[j1]
        dist = points_to_segments(xy, a[s0:s1], b[s0:s1])
        nearest = np.minimum.reduceat(dist, bounds[j0:j1] - s0, axis=1)
        out[j0:j1] = [_mean(column) for column in nearest.T]
        j0 = j1
    return out


def _directed_spd(xy1, xy2):
    a, b = _segment_endpoints(xy2)
    return _mean(points_to_segments(xy1, a, b).min(axis=1))


def spd(t1, t2):
    """Segment-Path Distance orientée : moyenne sur les points de t1 de leur distance à t2."""
    return _directed_spd(t1.xy, t2.xy)


def sspd(t1, t2):
    """Symmetrized Segment-Path Distance : moyenne des deux SPD orientées."""
    return (_directed_spd(t1.xy, t2.xy) + _directed_spd(t2.xy, t1.xy)) / 2.0


def haversine_many(lonlat1, lonlat2):
    """Distances de Haversine (km) entre deux tableaux (n, 2) de (lon, lat)."""
    lonlat1 = np.radians(np.asarray(lonlat1, dtype=float).reshape(-1, 2))
    lonlat2 = np.radians(np.asarray(lonlat2, dtype=float).reshape(-1, 2))
    dlon = lonlat2[:, 0] - lonlat1[:, 0]
    dlat = lonlat2[:, 1] - lonlat1[:, 1]
    a = np.sin(dlat / 2) ** 2 + np.cos(lonlat1[:, 1]) * np.cos(lonlat2[:, 1]) * np.sin(dlon / 2) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(a), np.sqrt(1 - a))


def haversine(d1, d2):
    return float(haversine_many([[d1.lon, d1.lat]], [[d2.lon, d2.lat]])[0])


def prefix(t, p):
    """
    p-trajectoire : plus long préfixe dont la longueur linéaire par morceaux
    n'excède pas p fois celle de t. Contient toujours au moins le premier point.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Fraction de complétion hors [0, 1]: {p}")
    if p == 1.0:
        return t
    cumulative = np.concatenate([[0.0], np.cumsum(t.segment_lengths)])
    budget = p * cumulative[-1]
    count = max(1, int(np.searchsorted(cumulative, budget, side='right')))
    return t.head(count)


def infer_projection(trajectories):
    """
    Retrouve l'origine du plan local dans lequel des trajectoires ont été projetées,
    en inversant la projection sur le premier point (xy et lonlat sont conservés).
    """
    if not trajectories:
        raise ValueError("Aucune trajectoire pour retrouver la projection")
    (x, y), (lon, lat) = trajectories[0].xy[0], trajectories[0].lonlat[0]
    lat0 = lat - math.degrees(y / EARTH_RADIUS_M)
    lon0 = lon - math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return Projection(GeoPoint(float(lon0), float(lat0)))
