import struct
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial.distance import squareform

from geometry import spd_to_many, stack_segments

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"SSPDMAT\0"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Matrice condensée (triangle supérieur, ligne par ligne) des SSPD deux à deux."""
    n: int
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if self.n < 2:
            raise ValueError(f"Matrice de distances: n = {self.n} < 2")
        if len(values) != self.n * (self.n - 1) // 2:
            raise ValueError(f"Matrice condensée de taille {len(values)} incompatible avec n = {self.n}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("Matrice de distances: valeurs négatives ou non finies")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def value(self, i, j):
        if i == j:
            return 0.0
        i, j = min(i, j), max(i, j)
        return float(self.values[condensed_index(self.n, i, j)])

    def square(self):
        return squareform(self.values)

    def row(self, i):
        """Distances de l'élément i à tous les autres (0 en position i)."""
        others = np.arange(self.n)
        lo = np.minimum(others, i)
        hi = np.maximum(others, i)
        out = np.zeros(self.n)
        mask = others != i
        out[mask] = self.values[condensed_index(self.n, lo[mask], hi[mask])]
        return out


def condensed_index(n, i, j):
    """Position de (i, j), i < j, dans le vecteur condensé."""
    return n * i - i * (i + 1) // 2 + (j - i - 1)


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True, eq=False)
class Dendrogram:
    """Arbre de fusion : les feuilles sont 0..n-1, la fusion k crée le nœud n + k."""
    n: int
    merges: tuple

    def as_linkage_matrix(self):
        return np.array([[m.left, m.right, m.height, m.size] for m in self.merges], dtype=float)


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Étiquettes l^i ∈ [1..K] des trajectoires."""
    labels: np.ndarray
    K: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=int).reshape(-1)
        if self.K < 1:
            raise ValueError(f"Nombre de clusters invalide: {self.K}")
        if np.any(labels < 1) or np.any(labels > self.K):
            raise ValueError("Étiquette de cluster hors de [1..K]")
        if len(np.unique(labels)) != self.K:
            raise ValueError("Cluster vide dans l'affectation")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def members(self, m):
        return np.flatnonzero(self.labels == m)

    def sizes(self):
        return np.bincount(self.labels, minlength=self.K + 1)[1:]


def _spd_rows(xys, a, b, starts, rows):
    return [(i, spd_to_many(xys[i], a, b, starts)) for i in rows]


def pairwise_distances(trajectories, n_jobs=1, tasks_per_worker=4):
    """
    Calcule la matrice condensée des SSPD.

    Chaque ligne i donne les SPD orientées de i vers toutes les trajectoires en
    un seul passage vectorisé ; SSPD(i, j) = (SPD(i→j) + SPD(j→i)) / 2.
    Les lignes sont réparties en tâches entrelacées (i, i + T, i + 2T, …) pour
    équilibrer la charge ; le résultat ne dépend pas de l'ordre d'exécution.
    """
    n = len(trajectories)
    if n < 2:
        raise ValueError(f"Au moins 2 trajectoires requises, reçu {n}")

    xys = [t.xy for t in trajectories]
    a, b, starts = stack_segments(xys)
    workers = max(1, n_jobs if n_jobs > 0 else 1)
    n_tasks = min(n, workers * tasks_per_worker)
    tasks = [list(range(start, n, n_tasks)) for start in range(n_tasks)]

    logger.info(f"SSPD: {n * (n - 1) // 2} paires, {len(a)} segments, {n_tasks} tâches, n_jobs={n_jobs}")
    results = Parallel(n_jobs=n_jobs)(delayed(_spd_rows)(xys, a, b, starts, rows) for rows in tasks)

    directed = np.empty((n, n))
    for chunk in results:
        for i, row in chunk:
            directed[i] = row
    upper, lower = np.triu_indices(n, k=1)
    return DistanceMatrix(n, (directed[upper, lower] + directed[lower, upper]) / 2.0)


def submatrix(d, indices):
    """Restriction de la matrice à un sous-ensemble d'indices (ordre conservé)."""
    indices = np.asarray(indices, dtype=int)
    m = len(indices)
    if m < 2:
        raise ValueError(f"Sous-matrice: au moins 2 indices requis, reçu {m}")
    rows, cols = np.triu_indices(m, k=1)
    a, b = indices[rows], indices[cols]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    if np.any(lo == hi):
        raise ValueError("Sous-matrice: indices dupliqués")
    return DistanceMatrix(m, d.values[condensed_index(d.n, lo, hi)])


def ward_linkage(d):
    """
    Classification ascendante hiérarchique, critère de Ward via la mise à jour
    de Lance-Williams sur les dissimilarités SSPD au carré.

    Les ex-aequo sont départagés par la plus petite paire (i, j), où un cluster
    est repéré par le plus petit indice de ses membres.
    """
    n = d.n
    d2 = squareform(d.values) ** 2
    np.fill_diagonal(d2, np.inf)

    size = np.ones(n, dtype=int)
    node = np.arange(n)
    active = np.ones(n, dtype=bool)
    nn = np.full(n, -1, dtype=int)
    nn_dist = np.full(n, np.inf)

    def refresh(i):
        row = d2[i, i + 1:]
        if row.size == 0:
            nn[i], nn_dist[i] = -1, np.inf
            return
        k = int(np.argmin(row))
        nn[i], nn_dist[i] = i + 1 + k, row[k]
        if not np.isfinite(nn_dist[i]):
            nn[i] = -1

    for i in range(n):
        refresh(i)

    merges = []
    violations = 0
    previous = 0.0
    for step in range(n - 1):
        a = int(np.argmin(nn_dist))
        b = int(nn[a])
        h2 = float(nn_dist[a])
        na, nb = size[a], size[b]

        others = np.flatnonzero(active)
        others = others[(others != a) & (others != b)]
        nc = size[others]
        updated = ((na + nc) * d2[a, others] + (nb + nc) * d2[b, others] - nc * h2) / (na + nb + nc)
        updated = np.maximum(updated, 0.0)
        d2[a, others] = updated
        d2[others, a] = updated
        d2[b, :] = np.inf
        d2[:, b] = np.inf
        active[b] = False
        nn[b], nn_dist[b] = -1, np.inf

        height = float(np.sqrt(h2))
        if height < previous - 1e-9 * max(1.0, previous):
            violations += 1
            logger.warning(f"Ward: fusion non monotone à l'étape {step} ({height:.6g} < {previous:.6g})")
        previous = max(previous, height)

        left, right = sorted((int(node[a]), int(node[b])))
        merges.append(Merge(left, right, height, int(na + nb)))
        node[a] = n + step
        size[a] = na + nb

        refresh(a)
        before = others[others < a]
        stale = np.isin(nn[before], (a, b))
        candidates = before[~stale]
        for c in before[stale]:
            refresh(c)
        closer = (d2[candidates, a] < nn_dist[candidates]) | (
            (d2[candidates, a] == nn_dist[candidates]) & (a < nn[candidates])
        )
        nn[candidates[closer]] = a
        nn_dist[candidates[closer]] = d2[candidates[closer], a]
        between = others[(others > a) & (others < b)]
        for c in between[nn[between] == b]:
            refresh(c)

    if violations:
        logger.warning(f"Ward: {violations} fusion(s) non monotone(s) sur {n - 1}")
    logger.info(f"Ward: {n - 1} fusions, hauteur finale {merges[-1].height:.1f} m")
    return Dendrogram(n, tuple(merges))


def cut(dend, K):
    """
    Coupe l'arbre en K clusters en annulant les K-1 dernières fusions.
    Les clusters sont numérotés 1..K dans l'ordre de leur premier membre.
    """
    n = dend.n
    if not 1 <= K <= n:
        raise ValueError(f"K = {K} hors de [1, {n}]")

    members = {i: [i] for i in range(n)}
    for step, merge in enumerate(dend.merges[:n - K]):
        members[n + step] = members.pop(merge.left) + members.pop(merge.right)

    root_of = np.empty(n, dtype=int)
    for root, leaves in members.items():
        root_of[leaves] = root

    labels = np.empty(n, dtype=int)
    numbering = {}
    for i in range(n):
        labels[i] = numbering.setdefault(root_of[i], len(numbering) + 1)
    return ClusterAssignment(labels, K)


def cluster_trajectories(d, K):
    """Raccourci : Ward puis coupe en K clusters."""
    return cut(ward_linkage(d), K)


def save_distance_matrix(d, path):
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, d.n))
        f.write(d.values.astype("<f8").tobytes())
    logger.info(f"Matrice de distances écrite: {path} (n={d.n})")


def load_distance_matrix(path):
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"Fichier de distances tronqué: {path}")
        magic, version, n = _HEADER.unpack(header)
        if magic != MATRIX_MAGIC:
            raise ValueError(f"Fichier de distances invalide (magic): {path}")
        if version != MATRIX_VERSION:
            raise ValueError(f"Version de fichier de distances non supportée: {version}")
        values = np.frombuffer(f.read(), dtype="<f8")
    return DistanceMatrix(int(n), values.astype(float))


def save_assignment(assignment, ids, path):
    df = pd.DataFrame({"trip_id": list(ids), "label": assignment.labels})
    df.to_csv(path, index=False)
    logger.info(f"Affectation écrite: {path} (K={assignment.K})")


def load_assignment(path):
    df = pd.read_csv(path, dtype={"trip_id": str})
    if not {"trip_id", "label"}.issubset(df.columns):
        raise ValueError(f"Fichier d'affectation invalide: {path}")
    labels = df["label"].to_numpy(dtype=int)
    return ClusterAssignment(labels, int(labels.max())), df["trip_id"].tolist()
