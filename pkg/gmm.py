import math
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from scipy.special import logsumexp
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from geometry import GeoPoint, PlanarPoint, Projection, infer_projection

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
# Tolérance relative sur la décroissance de la log-vraisemblance entre itérations
MONOTONE_SLACK = 1e-8


@dataclass(frozen=True)
class EmConfig:
    """Paramètres de l'optimiseur EM (absents du modèle statistique lui-même)."""
    max_iter: int = 300
    tol: float = 1e-6
    n_restarts: int = 5
    cov_floor: float = 1.0
    seed: int = 0
    bic_penalty: str = "full"
    n_jobs: int = 1

    def __post_init__(self):
        if self.max_iter < 1 or self.n_restarts < 1:
            raise ValueError("max_iter et n_restarts doivent être positifs")
        if self.tol <= 0 or self.cov_floor <= 0:
            raise ValueError("tol et cov_floor doivent être strictement positifs")
        if self.seed < 0:
            raise ValueError(f"Graine invalide: {self.seed}")
        if self.bic_penalty not in ("full", "bare"):
            raise ValueError(f"Pénalité BIC inconnue: {self.bic_penalty}")

    def single_process(self):
        return EmConfig(self.max_iter, self.tol, self.n_restarts, self.cov_floor, self.seed,
                        self.bic_penalty, n_jobs=1)


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(2)
        cov = np.array(self.covariance, dtype=float).reshape(2, 2)
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"Poids de composante hors ]0, 1]: {self.weight}")
        _check_covariance(cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Mélange gaussien 2D Φ^m ; history trace la log-vraisemblance par itération."""
    components: tuple
    train_log_likelihood: float
    n_train: int
    history: tuple = ()

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("Un mélange requiert au moins une composante")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Somme des poids = {total}, attendu 1")

    @property
    def k(self):
        return len(self.components)

    @property
    def weights(self):
        return np.array([c.weight for c in self.components])

    @property
    def means(self):
        return np.array([c.mean for c in self.components])

    @property
    def covariances(self):
        return np.array([c.covariance for c in self.components])

    @property
    def n_iter(self):
        return max(0, len(self.history) - 1)


@dataclass(frozen=True, eq=False)
class ClusterModel:
    mixture: MixtureModel
    mean_destination: np.ndarray
    member_count: int

    def __post_init__(self):
        if self.member_count < 1:
            raise ValueError("Un cluster doit contenir au moins une trajectoire")
        dest = np.array(self.mean_destination, dtype=float).reshape(2)
        dest.setflags(write=False)
        object.__setattr__(self, "mean_destination", dest)


@dataclass(frozen=True, eq=False)
class FlowModel:
    """
    K modèles de clusters et tables de poids auxiliaires :
    a_emp[m-1], a_wd[d-1, m-1], a_h[h, m-1].
    """
    clusters: tuple
    a_emp: np.ndarray
    a_wd: np.ndarray
    a_h: np.ndarray
    origin: GeoPoint

    def __post_init__(self):
        K = len(self.clusters)
        if K < 1:
            raise ValueError("Modèle de flux sans cluster")
        tables = {
            "a_emp": np.array(self.a_emp, dtype=float).reshape(K),
            "a_wd": np.array(self.a_wd, dtype=float).reshape(7, K),
            "a_h": np.array(self.a_h, dtype=float).reshape(24, K),
        }
        for name, table in tables.items():
            if np.any(np.abs(table.sum(axis=-1) - 1.0) > 1e-9):
                raise ValueError(f"Table {name}: les poids ne somment pas à 1")
            table.setflags(write=False)
            object.__setattr__(self, name, table)

    @property
    def K(self):
        return len(self.clusters)

    @property
    def projection(self):
        return Projection(self.origin)

    @property
    def destinations(self):
        return np.array([c.mean_destination for c in self.clusters])


def _check_covariance(cov):
    if not np.all(np.isfinite(cov)):
        raise ValueError("Covariance non finie")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ValueError("Covariance non symétrique")
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("Covariance non définie positive")


def _as_points(points):
    if isinstance(points, PlanarPoint):
        return np.array([[points.x, points.y]])
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], PlanarPoint):
        return np.array([[p.x, p.y] for p in points])
    return np.asarray(points, dtype=float).reshape(-1, 2)


def _component_log_pdf(X, mean, cov):
    # log N(x | μ, Σ) via Cholesky : -log|L| - ½‖L⁻¹(x-μ)‖² - log 2π
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        raise ValueError("Covariance non définie positive")
    solved = linalg.solve_triangular(chol, (X - mean).T, lower=True)
    return -np.sum(np.log(np.diag(chol))) - 0.5 * np.sum(solved ** 2, axis=0) - LOG_2PI


def _weighted_log_prob(X, weights, means, covariances):
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return np.column_stack([
        log_w[j] + _component_log_pdf(X, means[j], covariances[j]) for j in range(len(weights))
    ])


def gaussian_log_pdf(p, c):
    """Log-densité de la loi normale bivariée de la composante c au(x) point(s) p."""
    _check_covariance(np.asarray(c.covariance))
    values = _component_log_pdf(_as_points(p), c.mean, c.covariance)
    return float(values[0]) if isinstance(p, PlanarPoint) else values


def mixture_log_pdf(p, m):
    """log Σ_k ω_k·φ_k(p), calculé par log-sum-exp."""
    log_prob = _weighted_log_prob(_as_points(p), m.weights, m.means, m.covariances)
    values = logsumexp(log_prob, axis=1)
    return float(values[0]) if isinstance(p, PlanarPoint) else values


def responsibilities(points, m):
    """Probabilités a posteriori (étape E) de chaque composante pour chaque point."""
    log_prob = _weighted_log_prob(_as_points(points), m.weights, m.means, m.covariances)
    return np.exp(log_prob - logsumexp(log_prob, axis=1, keepdims=True))


def point_partition(points, m):
    """Partition des points selon leur composante la plus probable (indices 0..k-1)."""
    log_prob = _weighted_log_prob(_as_points(points), m.weights, m.means, m.covariances)
    return np.argmax(log_prob, axis=1)


def floor_covariance(cov, floor):
    """Plancher de régularisation : Σ + floor·I."""
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    return cov + floor * np.eye(2)


def _build_model(weights, means, covariances, log_likelihood, n, history):
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    components = tuple(
        GaussianComponent(float(w), mu, 0.5 * (cov + cov.T))
        for w, mu, cov in zip(weights, means, np.asarray(covariances, dtype=float))
    )
    return MixtureModel(components, float(log_likelihood), int(n), tuple(float(v) for v in history))


def _em_run(X, k, cfg, seed):
    """
    Un redémarrage EM : GaussianMixture avancé d'une itération par appel
    (warm_start) pour relever la log-vraisemblance de chaque itération.
    reg_covar = cfg.cov_floor ajoute le plancher à la diagonale à chaque étape M.
    """
    n = len(X)
    mixture = GaussianMixture(
        n_components=k,
        covariance_type="full",
        reg_covar=cfg.cov_floor,
        init_params="k-means++",
        max_iter=1,
        tol=0.0,
        warm_start=True,
        random_state=seed,
    )
    history = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(cfg.max_iter):
            mixture.fit(X)
            # lower_bound_ : log-vraisemblance moyenne avant l'étape M de l'appel
            history.append(float(mixture.lower_bound_) * n)
            if len(history) > 1 and abs(history[-1] - history[-2]) <= cfg.tol * abs(history[-2]):
                break
        else:
            logger.debug(f"EM k={k}: max_iter={cfg.max_iter} atteint sans convergence")
    ll = float(mixture.score(X)) * n
    history.append(ll)

    slack = MONOTONE_SLACK * np.maximum(1.0, np.abs(history[:-1]))
    decreases = int(np.sum(np.diff(history) < -slack))
    if decreases:
        logger.warning(f"EM k={k}: log-vraisemblance en baisse sur {decreases} itération(s)")
    return _build_model(mixture.weights_, mixture.means_, mixture.covariances_, ll, n, history)


def em_fit(points, k, cfg):
    """
    Ajuste un mélange de k gaussiennes 2D par maximum de vraisemblance (EM).

    Initialisation k-means++, plancher cfg.cov_floor ajouté à la diagonale des
    covariances à chaque étape M, meilleur de cfg.n_restarts redémarrages.
    k = 1 est résolu analytiquement (moyenne et covariance empiriques + plancher).
    """
    X = _as_points(points)
    n = len(X)
    if k < 1:
        raise ValueError(f"Nombre de composantes invalide: {k}")
    if n < k:
        raise ValueError(f"{n} points pour {k} composantes")

    if k == 1:
        mean = X.mean(axis=0)
        cov = floor_covariance(np.cov(X.T, bias=True) if n > 1 else np.zeros((2, 2)), cfg.cov_floor)
        ll = float(_component_log_pdf(X, mean, cov).sum())
        return _build_model([1.0], [mean], [cov], ll, n, [ll])

    rng = np.random.default_rng([cfg.seed, k])
    seeds = rng.integers(0, 2 ** 31 - 1, size=cfg.n_restarts)
    best = None
    for seed in seeds:
        model = _em_run(X, k, cfg, int(seed))
        if best is None or model.train_log_likelihood > best.train_log_likelihood:
            best = model
    logger.debug(f"EM k={k}: logL={best.train_log_likelihood:.3f} en {best.n_iter} itérations")
    return best


def n_parameters(k, penalty="full"):
    """Paramètres libres d'un mélange 2D complet : (k-1) poids + 2k moyennes + 3k covariances."""
    return 6 * k - 1 if penalty == "full" else k


def bic(log_likelihood, k, n, penalty="full"):
    """BIC = -2·logL + p·ln(n) ; plus petit = meilleur."""
    if n < 1:
        raise ValueError(f"Effectif invalide pour le BIC: {n}")
    return -2.0 * log_likelihood + n_parameters(k, penalty) * math.log(n)


def select_k(points, k_range, cfg):
    """Ajuste chaque k de la plage et retient le modèle de BIC minimal (ex-aequo : plus petit k)."""
    X = _as_points(points)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("Plage de k vide")
    if ks[-1] > len(X):
        raise ValueError(f"k max = {ks[-1]} > {len(X)} points")

    models = Parallel(n_jobs=cfg.n_jobs)(delayed(em_fit)(X, k, cfg) for k in ks)
    scores = [bic(m.train_log_likelihood, m.k, len(X), cfg.bic_penalty) for m in models]
    best = 0
    for i in range(1, len(ks)):
        if scores[i] < scores[best]:
            best = i
    logger.info(f"BIC: k={ks[best]} retenu parmi {ks[0]}..{ks[-1]} ({len(X)} points)")
    return models[best]


def _normalize_counts(counts, smoothing):
    K = counts.shape[-1]
    num = counts + smoothing
    den = num.sum(axis=-1, keepdims=True)
    # Strate jamais observée sans lissage : poids uniformes
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / K)


def build_weight_tables(trajectories, labels, smoothing=1.0):
    """
    Tables a_emp, a_wd, a_h comptées sur l'apprentissage, lissées (Laplace, force
    `smoothing`) sur les clusters. smoothing = 0 donne les rapports de comptes bruts.
    """
    if smoothing < 0:
        raise ValueError(f"Lissage négatif: {smoothing}")
    K = labels.K
    idx = labels.labels - 1
    emp = np.bincount(idx, minlength=K).astype(float)
    wd = np.zeros((7, K))
    hours = np.zeros((24, K))
    for t, m in zip(trajectories, idx):
        wd[t.start_weekday - 1, m] += 1
        hours[t.start_hour, m] += 1
    return (
        _normalize_counts(emp, smoothing),
        _normalize_counts(wd, smoothing),
        _normalize_counts(hours, smoothing),
    )


def _fit_cluster(points, k_range, cfg):
    ks = [k for k in k_range if k <= len(points)]
    return select_k(points, ks, cfg)


def fit_flow_model(trajectories, labels, cfg, k_range, smoothing=1.0, projection=None):
    """
    Apprend le modèle de flux : pour chaque cluster m, un mélange Φ^m sur
    l'ensemble des points P^m, la destination moyenne d^m et les tables de poids.
    """
    k_range = sorted(set(int(k) for k in k_range))
    if not k_range or k_range[0] < 1:
        raise ValueError(f"Plage de k invalide: {k_range}")
    if len(labels.labels) != len(trajectories):
        raise ValueError("Étiquettes et trajectoires de tailles différentes")
    projection = projection or infer_projection(trajectories)

    pools = []
    for m in range(1, labels.K + 1):
        members = labels.members(m)
        if len(members) == 0:
            raise ValueError(f"Cluster {m} vide")
        points = np.vstack([trajectories[i].xy for i in members])
        if len(points) < k_range[0]:
            raise ValueError(f"Cluster {m}: {len(points)} points < k min = {k_range[0]}")
        pools.append((members, points))

    mixtures = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_fit_cluster)(points, k_range, cfg.single_process()) for _, points in pools
    )

    clusters = []
    for (members, _), mixture in zip(pools, mixtures):
        destinations = np.array([trajectories[i].final_xy for i in members])
        clusters.append(ClusterModel(mixture, destinations.mean(axis=0), len(members)))

    a_emp, a_wd, a_h = build_weight_tables(trajectories, labels, smoothing)
    logger.info(f"Modèle de flux: K={labels.K}, k^m={[c.mixture.k for c in clusters]}")
    return FlowModel(tuple(clusters), a_emp, a_wd, a_h, projection.origin)
