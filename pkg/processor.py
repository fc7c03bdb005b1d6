import os
import json
import math
import logging
from dataclasses import dataclass, field

import chardet
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from geometry import GeoPoint, Projection, Trajectory, check_lonlat, haversine_many, start_context

logger = logging.getLogger(__name__)

SOURCES = ("porto-csv", "cabspotting-dir", "synthetic")

STATIONS = {
    "caltrain": GeoPoint(-122.3942, 37.7766),
    "sao-bento": GeoPoint(-8.6110, 41.1456),
}
DEFAULT_RADIUS_M = 300.0
DEFAULT_SAMPLING_S = 15.0
CANONICAL_COLUMNS = ["trip_id", "start_epoch", "start_hour", "start_weekday", "polyline"]
PORTO_COLUMNS = {"TRIP_ID", "TIMESTAMP", "POLYLINE"}


@dataclass(frozen=True)
class DatasetSpec:
    """
    Sélection d'un sous-ensemble de trajets.

    origin / radius_m : le premier point doit être à moins de radius_m (Haversine)
    de l'origine ; bbox = (lon_min, lat_min, lon_max, lat_max) doit contenir le
    dernier point. Sans origine ni bbox, seuls les nombres de points sont filtrés.
    """
    source: str = "porto-csv"
    origin: GeoPoint = None
    radius_m: float = DEFAULT_RADIUS_M
    bbox: tuple = None
    min_points: int = 2
    max_points: int = None
    timezone: str = None
    sampling_interval_s: float = DEFAULT_SAMPLING_S
    strict: bool = False

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"Source inconnue: {self.source} (attendu: {', '.join(SOURCES)})")
        if not self.radius_m > 0:
            raise ValueError(f"Rayon invalide: {self.radius_m}")
        if self.bbox is not None:
            lon_min, lat_min, lon_max, lat_max = map(float, self.bbox)
            if lon_min > lon_max or lat_min > lat_max:
                raise ValueError(f"Boîte englobante mal ordonnée: {self.bbox}")
            object.__setattr__(self, "bbox", (lon_min, lat_min, lon_max, lat_max))
        if self.min_points < 2:
            raise ValueError(f"min_points doit être >= 2: {self.min_points}")
        if self.max_points is not None and self.max_points < self.min_points:
            raise ValueError(f"max_points ({self.max_points}) < min_points ({self.min_points})")
        if not self.sampling_interval_s > 0:
            raise ValueError(f"Intervalle d'échantillonnage invalide: {self.sampling_interval_s}")


@dataclass(frozen=True)
class SyntheticCitySpec:
    """
    Ville synthétique : K flux partant d'une origine commune, chacun suivant un
    tronc commun de trunk_m mètres puis `waypoints` tronçons en éventail.
    """
    K: int = 3
    per_flow: int = 200
    waypoints: int = 3
    noise_m: float = 20.0
    step_m: float = 50.0
    seed: int = 0
    origin: GeoPoint = field(default_factory=lambda: STATIONS["sao-bento"])
    trunk_m: float = 500.0
    leg_m: float = 1000.0
    speed_mps: float = 8.0
    # 2013-07-01 00:00 UTC, un lundi
    start_epoch: float = 1_372_636_800.0
    timezone: str = "UTC"

    def __post_init__(self):
        for name in ("K", "per_flow", "waypoints", "step_m", "leg_m", "speed_mps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SyntheticCitySpec.{name} doit être > 0")
        if self.noise_m < 0 or self.trunk_m < 0:
            raise ValueError("SyntheticCitySpec: bruit et tronc commun doivent être >= 0")


def detect_encoding(path, sample_size=65536):
    """Encodage probable d'un fichier texte (chardet), utf-8 par défaut."""
    with open(path, "rb") as f:
        sample = f.read(sample_size)
    guess = chardet.detect(sample) if sample else {}
    encoding = (guess.get("encoding") or "utf-8").lower()
    return "utf-8" if encoding == "ascii" else encoding


def resolve_encoding(path, block_size=1 << 20):
    """
    Premier encodage, parmi le détecté puis les replis utf-8 et latin-1, qui
    décode le fichier entier.
    """
    encodings = [detect_encoding(path), "utf-8", "latin-1"]
    last_error = None
    for encoding in dict.fromkeys(encodings):
        try:
            with open(path, "r", encoding=encoding) as f:
                while f.read(block_size):
                    pass
            return encoding
        except (UnicodeDecodeError, LookupError) as e:
            last_error = e
            logger.debug(f"Lecture {path} en {encoding} impossible: {e}")
    raise ValueError(f"Impossible de lire le CSV {path}: {last_error}")


def read_csv_robust(path, **kwargs):
    """Lit un CSV (éventuellement par blocs avec chunksize) dans un encodage qui le décode en entier."""
    return pd.read_csv(path, encoding=resolve_encoding(path), **kwargs)


def _inside_bbox(lonlat, bbox):
    lon_min, lat_min, lon_max, lat_max = bbox
    return (lon_min <= lonlat[0] <= lon_max) and (lat_min <= lonlat[1] <= lat_max)


def filter_trajectories(trajectories, spec):
    """
    Conserve les trajectoires partant à moins de radius_m de l'origine, se
    terminant dans la boîte englobante et dont le nombre de points est dans
    [min_points, max_points]. Opération idempotente.
    """
    kept = []
    for t in trajectories:
        n = len(t)
        if n < spec.min_points or (spec.max_points is not None and n > spec.max_points):
            continue
        if spec.origin is not None:
            distance_m = 1000.0 * haversine_many(t.lonlat[0], [spec.origin.lon, spec.origin.lat])[0]
            if distance_m > spec.radius_m:
                continue
        if spec.bbox is not None and not _inside_bbox(t.lonlat[-1], spec.bbox):
            continue
        kept.append(t)
    logger.info(f"Filtre: {len(kept)}/{len(trajectories)} trajectoires conservées")
    return kept


class BaseProcessor:
    """Classe de base des lecteurs de jeux de trajectoires."""

    default_timezone = "UTC"

    def __init__(self, path, spec):
        self.path = path
        self.spec = spec
        self.records = None
        self.trajectories = None
        self.skipped = 0

    @property
    def timezone(self):
        return self.spec.timezone or self.default_timezone

    def read(self):
        """Remplit self.records : liste de (trip_id, lonlat (n, 2), times (n,))."""
        raise NotImplementedError

    def reject(self, where, reason):
        if self.spec.strict:
            raise ValueError(f"{where}: {reason}")
        self.skipped += 1
        logger.debug(f"Ignoré {where}: {reason}")

    def projection(self):
        if self.spec.origin is not None:
            return Projection(self.spec.origin)
        if not self.records:
            raise ValueError(f"Aucune trajectoire lue dans {self.path}")
        return Projection.centered_on(np.vstack([lonlat for _, lonlat, _ in self.records]))

    def apply_transformations(self):
        """Projette les enregistrements lus puis applique le filtre du jeu de données."""
        if self.records is None:
            raise ValueError("Aucune donnée lue: appeler read() d'abord")
        valid = []
        for trip_id, lonlat, times in self.records:
            try:
                check_lonlat(lonlat)
            except ValueError as e:
                self.reject(f"trajet {trip_id}", str(e))
                continue
            valid.append((trip_id, lonlat, times))
        self.records = valid
        if not valid:
            logger.warning(f"{self.path}: aucun trajet exploitable ({self.skipped} ignoré(s))")
            self.trajectories = []
            return self.trajectories
        projection = self.projection()
        trajectories = []
        for trip_id, lonlat, times in self.records:
            try:
                trajectories.append(Trajectory.from_geo(trip_id, lonlat, times, projection, self.timezone))
            except ValueError as e:
                self.reject(f"trajet {trip_id}", str(e))
        if self.skipped:
            logger.warning(f"{self.path}: {self.skipped} enregistrement(s) ignoré(s)")
        self.trajectories = filter_trajectories(trajectories, self.spec)
        return self.trajectories

    def run(self):
        self.read()
        return self.apply_transformations()


class PortoProcessor(BaseProcessor):
    """CSV Porto : POLYLINE = [[lon, lat], ...], TIMESTAMP = epoch du départ."""

    default_timezone = "Europe/Lisbon"
    chunk_size = 10_000

    def read(self):
        self.records = []
        reader = read_csv_robust(self.path, dtype=str, keep_default_na=False, chunksize=self.chunk_size)
        for chunk in reader:
            missing = PORTO_COLUMNS - set(chunk.columns)
            if missing:
                raise ValueError(f"Colonnes manquantes dans {self.path}: {sorted(missing)}")
            flags = chunk["MISSING_DATA"] if "MISSING_DATA" in chunk.columns else [""] * len(chunk)
            for trip_id, stamp, polyline, missing_data in zip(
                chunk["TRIP_ID"], chunk["TIMESTAMP"], chunk["POLYLINE"], flags
            ):
                if str(missing_data).strip().lower() == "true":
                    self.reject(f"trajet {trip_id}", "MISSING_DATA")
                    continue
                record = self._parse_row(trip_id, stamp, polyline)
                if record is not None:
                    self.records.append(record)
        logger.info(f"Porto: {len(self.records)} trajets lus dans {self.path}")
        return self.records

    def _parse_row(self, trip_id, stamp, polyline):
        where = f"trajet {trip_id}"
        try:
            start = float(stamp)
            coords = json.loads(polyline)
        except (TypeError, ValueError) as e:
            self.reject(where, f"ligne mal formée ({e})")
            return None
        if not isinstance(coords, list) or len(coords) == 0:
            self.reject(where, "polyline vide")
            return None
        try:
            lonlat = np.asarray(coords, dtype=float)
        except (TypeError, ValueError) as e:
            self.reject(where, f"polyline mal formée ({e})")
            return None
        if lonlat.ndim != 2 or lonlat.shape[1] != 2:
            self.reject(where, "polyline mal formée")
            return None
        if len(lonlat) < 2:
            self.reject(where, "moins de 2 points")
            return None
        times = start + self.spec.sampling_interval_s * np.arange(len(lonlat))
        return str(trip_id), lonlat, times


def occupied_runs(flags):
    """Plages d'indices consécutifs où le drapeau d'occupation vaut 1."""
    flags = np.asarray(flags, dtype=int)
    occupied = np.concatenate([[0], (flags == 1).astype(int), [0]])
    edges = np.diff(occupied)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [np.arange(s, e) for s, e in zip(starts, ends)]


def _read_cab_file(path, strict):
    """Trajets occupés d'un fichier cabspotting (lat lon flag epoch, plus récent d'abord)."""
    taxi = os.path.splitext(os.path.basename(path))[0]
    frame = pd.read_csv(path, sep=r"\s+", header=None, names=["lat", "lon", "flag", "epoch"],
                        dtype=str, on_bad_lines="skip" if not strict else "error")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1)
    if bad.any() and strict:
        raise ValueError(f"{path}: {int(bad.sum())} ligne(s) mal formée(s)")
    numeric = numeric.loc[~bad].sort_values("epoch", kind="mergesort").reset_index(drop=True)

    records, short = [], 0
    for k, run in enumerate(occupied_runs(numeric["flag"].to_numpy())):
        if len(run) < 2:
            short += 1
            continue
        rows = numeric.iloc[run]
        lonlat = rows[["lon", "lat"]].to_numpy(dtype=float)
        records.append((f"{taxi}_{k}", lonlat, rows["epoch"].to_numpy(dtype=float)))
    return records, int(bad.sum()) + short


class CabspottingProcessor(BaseProcessor):
    """Répertoire cabspotting : un fichier par taxi, trajets = plages occupées."""

    default_timezone = "America/Los_Angeles"

    def __init__(self, path, spec, n_jobs=1):
        super().__init__(path, spec)
        self.n_jobs = n_jobs

    def read(self):
        if not os.path.isdir(self.path):
            raise ValueError(f"Répertoire cabspotting introuvable: {self.path}")
        files = sorted(
            os.path.join(self.path, name) for name in os.listdir(self.path)
            if name.endswith(".txt") and not name.startswith("_")
        )
        results = Parallel(n_jobs=self.n_jobs)(delayed(_read_cab_file)(f, self.spec.strict) for f in files)
        self.records = []
        for records, skipped in results:
            self.records.extend(records)
            self.skipped += skipped
        logger.info(f"Cabspotting: {len(self.records)} trajets occupés dans {len(files)} fichiers")
        return self.records


def _flow_path(m, spec, rng):
    """Sommets (x, y) du flux m : tronc commun vers le nord puis tronçons en éventail."""
    vertices = [np.zeros(2)]
    if spec.trunk_m > 0:
        vertices.append(np.array([0.0, spec.trunk_m]))
    heading = math.pi * (m + 0.5) / spec.K
    for _ in range(spec.waypoints):
        length = spec.leg_m * rng.uniform(0.8, 1.2)
        vertices.append(vertices[-1] + length * np.array([math.cos(heading), math.sin(heading)]))
        heading += rng.uniform(-math.pi / 12, math.pi / 12)
    return np.array(vertices)


def _sample_polyline(vertices, end, step):
    cumulative = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(vertices, axis=0).T))])
    arc = np.arange(0.0, end, step)
    if arc[-1] < end:
        arc = np.append(arc, end)
    return arc, np.column_stack([np.interp(arc, cumulative, vertices[:, 0]),
                                 np.interp(arc, cumulative, vertices[:, 1])])


def synth_city(spec):
    """
    Génère une ville synthétique ; retourne (trajectoires, étiquettes de flux 1..K).
    Chaque trajet suit le polyligne de son flux jusqu'à une fraction aléatoire
    (85-100 %) de sa longueur, échantillonné tous les step_m mètres et bruité.
    """
    rng = np.random.default_rng(spec.seed)
    projection = Projection(spec.origin)
    paths = [_flow_path(m, spec, rng) for m in range(spec.K)]

    trajectories, labels = [], []
    for m, vertices in enumerate(paths):
        total = float(np.hypot(*np.diff(vertices, axis=0).T).sum())
        preferred_hour = (7 + 5 * m) % 24
        for i in range(spec.per_flow):
            arc, xy = _sample_polyline(vertices, total * rng.uniform(0.85, 1.0), spec.step_m)
            if spec.noise_m > 0:
                xy = xy + rng.normal(0.0, spec.noise_m, size=xy.shape)
            hour = (preferred_hour + int(round(rng.normal(0.0, 1.5)))) % 24
            start = spec.start_epoch + 86400 * int(rng.integers(0, 7)) + 3600 * hour + rng.uniform(0, 3600)
            start_hour, start_weekday = start_context(start, spec.timezone)
            trajectories.append(Trajectory(
                id=f"synth-{m + 1}-{i:04d}",
                xy=xy,
                times=start + arc / spec.speed_mps,
                lonlat=projection.unproject_many(xy),
                start_hour=start_hour,
                start_weekday=start_weekday,
            ))
            labels.append(m + 1)

    order = rng.permutation(len(trajectories))
    logger.info(f"Ville synthétique: {spec.K} flux x {spec.per_flow} trajets (graine {spec.seed})")
    return [trajectories[i] for i in order], np.array(labels)[order]


class SyntheticProcessor(BaseProcessor):
    """Ville synthétique ; `labels` garde les flux générateurs."""

    def __init__(self, path, spec):
        super().__init__(path, spec)
        self.labels = None

    def read(self):
        self.trajectories, self.labels = synth_city(self.spec)
        self.records = [(t.id, t.lonlat, t.times) for t in self.trajectories]
        return self.records

    def apply_transformations(self):
        return self.trajectories


class ProcessorFactory:
    """Factory pour instancier le bon lecteur selon la source."""

    @staticmethod
    def get_processor(source, path, spec, n_jobs=1):
        source = (source or "").lower()
        if not source:
            if isinstance(spec, SyntheticCitySpec):
                source = "synthetic"
            elif path and os.path.isdir(path):
                source = "cabspotting-dir"
            elif path and path.lower().endswith(".csv"):
                source = "porto-csv"
        if source == "synthetic":
            return SyntheticProcessor(path, spec)
        if source == "cabspotting-dir":
            return CabspottingProcessor(path, spec, n_jobs=n_jobs)
        if source == "porto-csv":
            return PortoProcessor(path, spec)
        raise ValueError(f"Source de données inconnue: {source or path}")


def parse_porto(path, spec=None):
    return PortoProcessor(path, spec or DatasetSpec(source="porto-csv")).run()


def parse_cabspotting(directory, spec=None, n_jobs=1):
    return CabspottingProcessor(directory, spec or DatasetSpec(source="cabspotting-dir"), n_jobs).run()


def write_canonical(trajectories, path, chunk_size=500):
    """
    Fichier canonique : une ligne par trajectoire (trip_id, start_epoch,
    start_hour, start_weekday, polyline JSON de triplets [lon, lat, t]).
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if not trajectories:
        pd.DataFrame(columns=CANONICAL_COLUMNS).to_csv(path, index=False)
    for i in range(0, len(trajectories), chunk_size):
        chunk = trajectories[i:i + chunk_size]
        rows = [
            {
                "trip_id": t.id,
                "start_epoch": float(t.times[0]),
                "start_hour": int(t.start_hour),
                "start_weekday": int(t.start_weekday),
                "polyline": json.dumps([[float(lon), float(lat), float(tt)]
                                        for (lon, lat), tt in zip(t.lonlat, t.times)]),
            }
            for t in chunk
        ]
        pd.DataFrame(rows, columns=CANONICAL_COLUMNS).to_csv(
            path, mode="w" if i == 0 else "a", header=i == 0, index=False
        )
        logger.debug(f"Fichier canonique: bloc {i // chunk_size + 1} écrit ({len(chunk)} trajets)")
    logger.info(f"Fichier canonique écrit: {path} ({len(trajectories)} trajectoires)")


def read_canonical(path, origin=None):
    """
    Relit un fichier canonique. Les positions planes sont recalculées dans la
    projection centrée sur `origin` (par défaut, le centroïde de tous les points).
    """
    frame = pd.read_csv(path, dtype={"trip_id": str})
    missing = set(CANONICAL_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"Fichier canonique invalide {path}: colonnes manquantes {sorted(missing)}")
    if frame.empty:
        return []
    triples = [np.asarray(json.loads(text), dtype=float).reshape(-1, 3) for text in frame["polyline"]]
    projection = Projection(origin) if origin is not None else Projection.centered_on(
        np.vstack([tr[:, :2] for tr in triples])
    )
    trajectories = [
        Trajectory(
            id=trip_id,
            xy=projection.project_many(tr[:, :2]),
            times=tr[:, 2],
            lonlat=tr[:, :2],
            start_hour=int(hour),
            start_weekday=int(weekday),
        )
        for trip_id, hour, weekday, tr in zip(frame["trip_id"], frame["start_hour"], frame["start_weekday"], triples)
    ]
    logger.info(f"Fichier canonique lu: {path} ({len(trajectories)} trajectoires)")
    return trajectories
