import os
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import rankdata
from sklearn.model_selection import KFold

from clustering import ClusterAssignment, cluster_trajectories, pairwise_distances, submatrix
from geometry import haversine_many, infer_projection, prefix, sspd
from gmm import EmConfig, fit_flow_model
from scoring import flags_label, parse_flags, score_vector, simple_log_score
from utils import json_safe

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(21))
DEFAULT_FLAG_SETS = ("none", "emp", "weekday", "hour", "emp+weekday+hour")
CLASS_METRICS = ("q_class", "best2", "best3")


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Indice de pli (0..n_folds-1) de chaque trajectoire."""
    folds: np.ndarray
    seed: int
    n_folds: int = 10

    def test_indices(self, k):
        return np.flatnonzero(self.folds == k)

    def train_indices(self, k):
        return np.flatnonzero(self.folds != k)


@dataclass(frozen=True)
class EvalConfig:
    K: int
    k_range: tuple = tuple(range(1, 41))
    em: EmConfig = field(default_factory=EmConfig)
    n_folds: int = 10
    seed: int = 0
    p_grid: tuple = DEFAULT_GRID
    flag_sets: tuple = DEFAULT_FLAG_SETS
    rules: tuple = (1, 2)
    smoothing: float = 1.0
    fast: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K invalide: {self.K}")
        if any(not 0.0 <= p <= 1.0 for p in self.p_grid):
            raise ValueError(f"Grille de complétion hors [0, 1]: {self.p_grid}")
        if any(rule not in (1, 2) for rule in self.rules):
            raise ValueError(f"Règle de prédiction inconnue: {self.rules}")


@dataclass(frozen=True, eq=False)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float = None

    @property
    def defined(self):
        return self.auc is not None


def kfold(trajectories, seed, n_folds=10):
    """Partition aléatoire (graine fixée) en n_folds plis de tailles égales à ±1."""
    n = len(trajectories)
    if n < n_folds:
        raise ValueError(f"{n} trajectoires pour {n_folds} plis")
    folds = np.empty(n, dtype=int)
    splitter = KFold(n_splits=n_folds, shuffle=True, random_state=seed)
    for k, (_, test) in enumerate(splitter.split(np.arange(n))):
        folds[test] = k
    return FoldPlan(folds, seed, n_folds)


def true_label_from_distances(distances, labels):
    """Cluster de SSPD moyenne minimale (ex-aequo : plus petit indice), à partir des distances aux membres."""
    distances = np.asarray(distances, dtype=float)
    sums = np.bincount(labels.labels - 1, weights=distances, minlength=labels.K)
    means = sums / labels.sizes()
    return int(np.argmin(means)) + 1


def true_label(t_full, train_clusters):
    """
    Étiquette de référence d'une trajectoire de test : le cluster d'apprentissage
    dont les membres sont, en moyenne, les plus proches au sens de la SSPD
    (trajectoire complète). train_clusters[m-1] liste les membres du cluster m.
    """
    means = [np.mean([sspd(t_full, member) for member in members]) for members in train_clusters]
    return int(np.argmin(means)) + 1


def _fold_mean(records, column, mask):
    selected = records.loc[mask]
    if selected.empty:
        return float("nan")
    return float(selected.groupby("fold")[column].mean().mean())


def q_class(p, records, flags="none"):
    """Taux de p-trajectoires bien classées, moyenné sur les plis."""
    mask = (records["p"] == p) & (records["flags"] == flags_label(parse_flags(flags)))
    return _fold_mean(records.assign(hit=records["rank"] == 1), "hit", mask)


def bestk(p, records, k, flags="none"):
    """Taux de p-trajectoires dont le vrai cluster figure parmi les k premiers."""
    mask = (records["p"] == p) & (records["flags"] == flags_label(parse_flags(flags)))
    return _fold_mean(records.assign(hit=records["rank"] <= k), "hit", mask)


def q_pred(p, records, rule, flags="none"):
    """Erreur moyenne de Haversine (km) entre destination prédite et réelle."""
    mask = (records["p"] == p) & (records["flags"] == flags_label(parse_flags(flags)))
    return _fold_mean(records, f"err{rule}_km", mask)


def roc_curve(positives, scores):
    """Courbe ROC par balayage des seuils observés (score >= seuil -> positif)."""
    positives = np.asarray(positives, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    thresholds = np.unique(scores)[::-1]
    n_pos, n_neg = positives.sum(), (~positives).sum()
    order = np.argsort(-scores, kind="stable")
    sorted_scores, sorted_pos = scores[order], positives[order]
    # Nombre d'observations de score >= seuil
    counts = np.searchsorted(-sorted_scores, -thresholds, side="right")
    cum_pos = np.concatenate([[0], np.cumsum(sorted_pos)])
    tp = cum_pos[counts]
    fp = counts - tp
    tpr = np.concatenate([[0.0], tp / n_pos if n_pos else np.zeros(len(tp))])
    fpr = np.concatenate([[0.0], fp / n_neg if n_neg else np.zeros(len(fp))])
    return fpr, tpr, np.concatenate([[np.inf], thresholds])


def auc_rank(positives, scores):
    """AUC par la statistique de Mann-Whitney (rangs moyens pour les ex-aequo) ; None si dégénéré."""
    positives = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(positives.sum()), int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(true_labels, normalized_scores):
    """ROC un-contre-tous pour chaque cluster, discriminant = score normalisé s_w^m."""
    true_labels = np.asarray(true_labels, dtype=int)
    normalized_scores = np.asarray(normalized_scores, dtype=float)
    results = []
    for m in range(1, normalized_scores.shape[1] + 1):
        positives = true_labels == m
        scores = normalized_scores[:, m - 1]
        auc = auc_rank(positives, scores)
        if auc is None:
            logger.warning(f"ROC: cluster {m} sans exemple positif ou négatif, AUC indéfinie")
        fpr, tpr, thresholds = roc_curve(positives, scores)
        results.append(RocResult(fpr, tpr, thresholds, auc))
    return results


@dataclass(eq=False)
class EvalReport:
    """
    Résultats d'évaluation : records (une ligne par trajectoire de test, complétion
    et jeu de poids), roc[(pli, cluster)] à p = 1 sans poids, et métadonnées.
    """
    records: pd.DataFrame
    roc: dict
    metadata: dict = field(default_factory=dict)

    def metrics(self):
        """Format long : p, metric, flags, rule, value."""
        rows = []
        rules = self.metadata.get("rules", (1, 2))
        for (p, flags), _ in self.records.groupby(["p", "flags"], sort=True):
            rows.append({"p": p, "metric": "q_class", "flags": flags, "rule": "",
                         "value": q_class(p, self.records, flags)})
            for k in (2, 3):
                rows.append({"p": p, "metric": f"best{k}", "flags": flags, "rule": "",
                             "value": bestk(p, self.records, k, flags)})
            for rule in rules:
                rows.append({"p": p, "metric": "q_pred", "flags": flags, "rule": str(rule),
                             "value": q_pred(p, self.records, rule, flags)})
        return pd.DataFrame(rows, columns=["p", "metric", "flags", "rule", "value"])

    def value(self, metric, p, flags="none", rule=None):
        if metric == "q_class":
            return q_class(p, self.records, flags)
        if metric in ("best2", "best3"):
            return bestk(p, self.records, int(metric[-1]), flags)
        if metric == "q_pred":
            return q_pred(p, self.records, rule, flags)
        raise ValueError(f"Métrique inconnue: {metric}")

    def auc_table(self):
        rows = [{"fold": fold, "cluster": m, "auc": r.auc} for (fold, m), r in sorted(self.roc.items())]
        return pd.DataFrame(rows, columns=["fold", "cluster", "auc"])

    def to_csv(self, out_dir):
        """Écrit metrics.csv, auc.csv, un CSV ROC par (pli, cluster), curves.dat et metadata.json."""
        os.makedirs(out_dir, exist_ok=True)
        metrics = self.metrics()
        metrics.to_csv(os.path.join(out_dir, "metrics.csv"), index=False, float_format="%.10g")
        self.auc_table().to_csv(os.path.join(out_dir, "auc.csv"), index=False, float_format="%.10g")
        for (fold, m), r in sorted(self.roc.items()):
            pd.DataFrame({"fpr": r.fpr, "tpr": r.tpr, "threshold": r.thresholds}).to_csv(
                os.path.join(out_dir, f"roc_fold{fold}_cluster{m}.csv"), index=False, float_format="%.10g"
            )
        # Données brutes pour les figures : une colonne par (métrique, poids, règle)
        wide = metrics.assign(series=metrics["metric"] + "_" + metrics["flags"]
                              + metrics["rule"].map(lambda r: f"_rule{r}" if r else ""))
        wide = wide.pivot(index="p", columns="series", values="value").sort_index()
        wide.to_csv(os.path.join(out_dir, "curves.dat"), sep=" ", float_format="%.10g")
        with open(os.path.join(out_dir, "metadata.json"), "w", encoding="utf-8") as fh:
            json.dump(json_safe(self.metadata), fh, indent=1)
            fh.write("\n")
        logger.info(f"Rapport d'évaluation écrit dans {out_dir}")


def _log_weight_vector(t, flags, f):
    weights = np.ones(f.K)
    if "emp" in flags:
        weights = weights * f.a_emp
    if "weekday" in flags:
        weights = weights * f.a_wd[t.start_weekday - 1]
    if "hour" in flags:
        weights = weights * f.a_h[t.start_hour]
    with np.errstate(divide="ignore"):
        return np.log(weights)


def completion_sweep(f, test_set, true_labels, p_grid=DEFAULT_GRID, flag_sets=DEFAULT_FLAG_SETS,
                     rules=(1, 2), fold=0):
    """
    Évalue classification et prédiction sur les p-trajectoires du jeu de test,
    pour chaque complétion de la grille et chaque jeu de poids auxiliaires.
    """
    flag_sets = [parse_flags(fs) for fs in flag_sets]
    destinations = f.destinations
    projection = f.projection
    rows = []
    roc_scores = []
    for t, label in zip(test_set, true_labels):
        final = t.lonlat[-1]
        for p in p_grid:
            observed = prefix(t, p)
            simple = np.array([simple_log_score(observed, c) for c in f.clusters])
            for flags in flag_sets:
                log_scores = simple + _log_weight_vector(t, flags, f) if flags else simple
                scores = score_vector(log_scores)
                ranked = np.argsort(-scores.log_scores, kind="stable") + 1
                weights = scores.normalized / scores.normalized.sum()
                predicted = projection.unproject_many(
                    np.vstack([destinations[ranked[0] - 1], weights @ destinations])
                )
                errors = haversine_many(predicted, np.vstack([final, final]))
                row = {
                    "fold": fold, "trip_id": t.id, "p": p, "flags": flags_label(flags),
                    "true_label": label, "guess": int(ranked[0]),
                    "rank": int(np.flatnonzero(ranked == label)[0]) + 1,
                }
                for rule in rules:
                    row[f"err{rule}_km"] = float(errors[rule - 1])
                rows.append(row)
                if p == 1.0 and not flags:
                    roc_scores.append(scores.normalized)

    records = pd.DataFrame(rows)
    roc = {}
    if roc_scores:
        for m, result in enumerate(roc_auc(true_labels, np.array(roc_scores)), start=1):
            roc[(fold, m)] = result
    return EvalReport(records, roc, {"rules": tuple(rules), "K": f.K})


def _evaluate_fold(trajectories, d, plan, k, cfg, projection, global_labels=None):
    train = plan.train_indices(k)
    test = plan.test_indices(k)
    train_set = [trajectories[i] for i in train]

    if global_labels is not None:
        kept = global_labels.labels[train]
        _, compact = np.unique(kept, return_inverse=True)
        labels = ClusterAssignment(compact + 1, int(compact.max()) + 1)
    else:
        labels = cluster_trajectories(submatrix(d, train), cfg.K)

    f = fit_flow_model(train_set, labels, cfg.em, cfg.k_range, cfg.smoothing, projection)
    truth = [true_label_from_distances(d.row(i)[train], labels) for i in test]
    report = completion_sweep(f, [trajectories[i] for i in test], truth, cfg.p_grid,
                              cfg.flag_sets, cfg.rules, fold=k)
    logger.info(f"Pli {k}: {len(train)} apprentissage / {len(test)} test, K={labels.K}")
    return report


def evaluate(trajectories, cfg, distances=None):
    """
    Validation croisée complète : pour chaque pli, classification hiérarchique
    et mélanges réappris sur 90 % des trajectoires, évaluation sur les 10 % restants.
    La matrice SSPD est calculée une fois ; chaque pli en extrait sa sous-matrice.
    """
    plan = kfold(trajectories, cfg.seed, cfg.n_folds)
    d = distances if distances is not None else pairwise_distances(trajectories, n_jobs=cfg.n_jobs)
    if d.n != len(trajectories):
        raise ValueError(f"Matrice de distances (n={d.n}) incompatible avec {len(trajectories)} trajectoires")
    projection = infer_projection(trajectories)

    global_labels = None
    if cfg.fast:
        logger.warning("Mode rapide: classification unique réutilisée sur tous les plis (non conforme)")
        global_labels = cluster_trajectories(d, cfg.K)

    inner = cfg.em if cfg.n_jobs == 1 else EmConfig(
        cfg.em.max_iter, cfg.em.tol, cfg.em.n_restarts, cfg.em.cov_floor, cfg.em.seed, cfg.em.bic_penalty, n_jobs=1
    )
    fold_cfg = EvalConfig(cfg.K, cfg.k_range, inner, cfg.n_folds, cfg.seed, cfg.p_grid, cfg.flag_sets,
                          cfg.rules, cfg.smoothing, cfg.fast, n_jobs=1)
    reports = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_evaluate_fold)(trajectories, d, plan, k, fold_cfg, projection, global_labels)
        for k in range(cfg.n_folds)
    )

    records = pd.concat([r.records for r in reports], ignore_index=True)
    roc = {}
    for r in reports:
        roc.update(r.roc)
    metadata = {"rules": tuple(cfg.rules), "K": cfg.K, "seed": cfg.seed,
                "n_folds": cfg.n_folds, "conformant": not cfg.fast,
                "p_grid": tuple(cfg.p_grid), "flag_sets": [flags_label(parse_flags(fs)) for fs in cfg.flag_sets],
                "k_range": [min(cfg.k_range), max(cfg.k_range)], "smoothing": cfg.smoothing,
                "cov_floor": cfg.em.cov_floor, "n_trajectories": len(trajectories)}
    return EvalReport(records, roc, metadata)


def weight_gain(report, metrics=("q_class", "q_pred")):
    """
    Écart de chaque jeu de poids par rapport à l'absence de poids, par complétion :
    delta = valeur(poids) - valeur(aucun). Q_pred est pris pour la règle 2.
    """
    table = report.metrics()
    table = table[table["metric"].isin(metrics) & table["rule"].isin(["", "2"])]
    base = table[table["flags"] == "none"].set_index(["p", "metric"])["value"]
    others = table[table["flags"] != "none"].copy()
    others["delta"] = [
        value - base.loc[(p, metric)] for p, metric, value in zip(others["p"], others["metric"], others["value"])
    ]
    return others[["p", "metric", "flags", "delta"]].reset_index(drop=True)


def cluster_count_sweep(trajectories, K_values, cfg, distances=None, completions=(0.1, 0.5, 1.0)):
    """Qualité de classification et de prédiction en fonction du nombre K de clusters."""
    d = distances if distances is not None else pairwise_distances(trajectories, n_jobs=cfg.n_jobs)
    grid = tuple(sorted(set(completions) | {1.0}))
    rows = []
    for K in K_values:
        sweep_cfg = EvalConfig(K, cfg.k_range, cfg.em, cfg.n_folds, cfg.seed, grid, ("none",),
                               (2,), cfg.smoothing, cfg.fast, cfg.n_jobs)
        report = evaluate(trajectories, sweep_cfg, d)
        row = {"K": K, "q_class": q_class(1.0, report.records),
               "best2": bestk(1.0, report.records, 2), "best3": bestk(1.0, report.records, 3)}
        for p in completions:
            row[f"q_pred_p{p:g}"] = q_pred(p, report.records, 2)
        rows.append(row)
        logger.info(f"Balayage K={K}: Q_class(1)={row['q_class']:.3f}")
    return pd.DataFrame(rows)
