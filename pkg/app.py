# FlowCast - apprentissage des flux de trajets et prédiction de destination
import os
import sys
import logging
import logging.handlers
import argparse
import traceback

import pandas as pd
from dotenv import load_dotenv, dotenv_values

from utils import snake_case, parse_int_range, parse_float_list
from geometry import GeoPoint
from clustering import (
    cluster_trajectories, load_assignment, load_distance_matrix, pairwise_distances,
    save_assignment, save_distance_matrix, ClusterAssignment,
)
from gmm import EmConfig, fit_flow_model
from scoring import load_flow_model, parse_flags, predict, predictions_to_frame, save_flow_model
from evaluation import DEFAULT_GRID, EvalConfig, cluster_count_sweep, evaluate
from processor import (
    STATIONS, DatasetSpec, ProcessorFactory, SyntheticCitySpec, read_canonical, synth_city, write_canonical,
)
from export import export_geojson

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s] %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'
logger = logging.getLogger(__name__)

APP_DIR = os.path.dirname(os.path.abspath(__file__))
ENV_PREFIX = "FLOWCAST_"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    """Option ou valeur invalide sur la ligne de commande ou dans la configuration."""


def parse_bool(value):
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "oui", "on"):
        return True
    if text in ("0", "false", "no", "non", "off", ""):
        return False
    raise ValueError(f"Booléen invalide: {value}")


def parse_level(value):
    level = str(value).strip().upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ValueError(f"Niveau de journal inconnu: {value}")
    return level


def parse_origin(value):
    """Station prédéfinie ("caltrain", "sao-bento") ou "lon,lat"."""
    key = snake_case(value).replace("_", "-")
    if key in STATIONS:
        return STATIONS[key]
    lon, lat = parse_float_list(value)
    return GeoPoint(lon, lat)


# dest -> (valeur par défaut, conversion)
OPTIONS = {
    "log_level": ("INFO", parse_level),
    "log_dir": (os.path.join(APP_DIR, "logs"), str),
    "workers": (1, int),
    "seed": (0, int),
    # fichiers
    "input": (None, str),
    "output": (None, str),
    "labels": (None, str),
    "model": (None, str),
    "trajectories": (None, str),
    "distances": (None, str),
    # ingest
    "source": (None, str),
    "origin": (None, parse_origin),
    "radius": (300.0, float),
    "bbox": (None, parse_float_list),
    "min_points": (2, int),
    "max_points": (None, int),
    "timezone": (None, str),
    "sampling_interval": (15.0, float),
    "strict": (False, parse_bool),
    # synth
    "flows": (3, int),
    "per_flow": (200, int),
    "waypoints": (3, int),
    "noise": (20.0, float),
    "step": (50.0, float),
    # cluster / fit
    "k": (None, int),
    "k_range": ("1..40", parse_int_range),
    "max_iter": (300, int),
    "tol": (1e-6, float),
    "restarts": (5, int),
    "cov_floor": (1.0, float),
    "bic_penalty": ("full", str),
    "smoothing": (1.0, float),
    # predict / export
    "completion": (1.0, float),
    "flags": ("none", parse_flags),
    "rule": (2, int),
    "predict": (False, parse_bool),
    "partition": (False, parse_bool),
    # evaluate / sweep
    "folds": (10, int),
    "grid": (DEFAULT_GRID, parse_float_list),
    "fast": (False, parse_bool),
    "k_values": ("5..50", parse_int_range),
}


# ============================================================
# LOGGING & ENVIRONNEMENT
# ============================================================
def setup_logging(log_dir, level="INFO"):
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, datefmt=LOG_DATEFMT)
    root = logging.getLogger()
    root.setLevel(level.upper())
    log_file = os.path.abspath(os.path.join(log_dir, "flowcast.log"))
    if any(getattr(h, "baseFilename", None) == log_file for h in root.handlers):
        return
    try:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_file, maxBytes=10 * 1024 * 1024, backupCount=5, encoding='utf-8'
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATEFMT))
        root.addHandler(file_handler)
    except OSError as e:
        logger.warning(f"Journal fichier indisponible ({e}), sortie console uniquement")


def get_env_flexible(name, default=None):
    """Cherche une variable d'environnement de manière insensible à la casse."""
    val = os.getenv(name)
    if val:
        return val
    val = os.getenv(name.lower()) or os.getenv(name.upper())
    if val:
        return val
    for k, v in os.environ.items():
        if k.upper() == name.upper():
            return v
    return default


def read_config(path):
    """Fichier `clé = valeur` ; les clés suivent les options longues (k-range, k_range, K_RANGE)."""
    if not os.path.isfile(path):
        raise UsageError(f"Fichier de configuration introuvable: {path}")
    config = {snake_case(k): v for k, v in dotenv_values(path).items() if v is not None}
    unknown = sorted(set(config) - set(OPTIONS) - {"config"})
    if unknown:
        logger.warning(f"Clés de configuration ignorées: {unknown}")
    return config


def resolve_options(args, config):
    """Priorité : option de ligne de commande > fichier de configuration > environnement > défaut."""
    for dest, (default, convert) in OPTIONS.items():
        if not hasattr(args, dest):
            continue
        raw = getattr(args, dest)
        if raw is None:
            raw = config.get(dest)
        if raw is None:
            raw = get_env_flexible(ENV_PREFIX + dest.upper())
        if raw is None:
            setattr(args, dest, default if not isinstance(default, str) or convert is str else convert(default))
            continue
        try:
            setattr(args, dest, convert(raw))
        except ValueError as e:
            raise UsageError(f"--{dest.replace('_', '-')}: {e}")
    return args


# ============================================================
# CONSTRUCTION DES CONFIGURATIONS
# ============================================================
def em_config(args):
    try:
        return EmConfig(max_iter=args.max_iter, tol=args.tol, n_restarts=args.restarts,
                        cov_floor=args.cov_floor, seed=args.seed, bic_penalty=args.bic_penalty,
                        n_jobs=args.workers)
    except ValueError as e:
        raise UsageError(str(e))


def dataset_spec(args, source):
    try:
        return DatasetSpec(
            source=source, origin=args.origin, radius_m=args.radius,
            bbox=tuple(args.bbox) if args.bbox else None, min_points=args.min_points,
            max_points=args.max_points, timezone=args.timezone,
            sampling_interval_s=args.sampling_interval, strict=args.strict,
        )
    except ValueError as e:
        raise UsageError(str(e))


def city_spec(args):
    try:
        return SyntheticCitySpec(K=args.flows, per_flow=args.per_flow, waypoints=args.waypoints,
                                 noise_m=args.noise, step_m=args.step, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e))


def require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"Option(s) requise(s): {', '.join('--' + n.replace('_', '-') for n in missing)}")


def labels_for(trajectories, labels_path):
    """Étiquettes du fichier d'affectation réordonnées selon les trajectoires."""
    assignment, ids = load_assignment(labels_path)
    by_id = dict(zip(ids, assignment.labels))
    missing = [t.id for t in trajectories if t.id not in by_id]
    if missing:
        raise ValueError(f"{len(missing)} trajectoire(s) sans étiquette, ex. {missing[0]}")
    return ClusterAssignment([by_id[t.id] for t in trajectories], assignment.K)


# ============================================================
# SOUS-COMMANDES
# ============================================================
def cmd_ingest(args):
    require(args, "input")
    source = args.source
    if not source:
        source = "cabspotting-dir" if os.path.isdir(args.input) else "porto-csv"
    processor = ProcessorFactory.get_processor(source, args.input, dataset_spec(args, source), n_jobs=args.workers)
    trajectories = processor.run()
    write_canonical(trajectories, args.output)
    return EXIT_OK


def cmd_synth(args):
    trajectories, labels = synth_city(city_spec(args))
    write_canonical(trajectories, args.output)
    if args.labels:
        save_assignment(ClusterAssignment(labels, args.flows), [t.id for t in trajectories], args.labels)
    return EXIT_OK


def cmd_distances(args):
    require(args, "input")
    d = pairwise_distances(read_canonical(args.input), n_jobs=args.workers)
    save_distance_matrix(d, args.output)
    return EXIT_OK


def cmd_cluster(args):
    require(args, "input", "trajectories", "k")
    d = load_distance_matrix(args.input)
    ids = pd.read_csv(args.trajectories, dtype={"trip_id": str}, usecols=["trip_id"])["trip_id"].tolist()
    if len(ids) != d.n:
        raise ValueError(f"{len(ids)} trajectoires pour une matrice de taille {d.n}")
    save_assignment(cluster_trajectories(d, args.k), ids, args.output)
    return EXIT_OK


def cmd_fit(args):
    require(args, "input", "labels")
    trajectories = read_canonical(args.input)
    labels = labels_for(trajectories, args.labels)
    model = fit_flow_model(trajectories, labels, em_config(args), args.k_range, args.smoothing)
    save_flow_model(model, args.output)
    return EXIT_OK


def cmd_predict(args):
    require(args, "model", "input")
    if args.rule not in (1, 2):
        raise UsageError(f"--rule doit valoir 1 ou 2: {args.rule}")
    if not 0.0 <= args.completion <= 1.0:
        raise UsageError(f"--completion hors [0, 1]: {args.completion}")
    model = load_flow_model(args.model)
    trajectories = read_canonical(args.input, origin=model.origin)
    results = [predict(t, model, args.flags, args.completion) for t in trajectories]
    frame = predictions_to_frame(results)
    frame.insert(2, "rule", args.rule)
    frame.insert(3, "pred_lon", frame[f"pred{args.rule}_lon"])
    frame.insert(4, "pred_lat", frame[f"pred{args.rule}_lat"])
    frame.to_csv(args.output, index=False, float_format="%.10g")
    logger.info(f"{len(results)} prédiction(s) écrite(s): {args.output}")
    return EXIT_OK


def eval_config(args, K):
    try:
        return EvalConfig(K=K, k_range=tuple(args.k_range), em=em_config(args), n_folds=args.folds,
                          seed=args.seed, p_grid=tuple(args.grid), smoothing=args.smoothing,
                          fast=args.fast, n_jobs=args.workers)
    except ValueError as e:
        raise UsageError(str(e))


def cmd_evaluate(args):
    require(args, "input", "k")
    trajectories = read_canonical(args.input)
    d = load_distance_matrix(args.distances) if args.distances else None
    report = evaluate(trajectories, eval_config(args, args.k), d)
    report.to_csv(args.output)
    return EXIT_OK


def cmd_sweep(args):
    require(args, "input")
    trajectories = read_canonical(args.input)
    d = load_distance_matrix(args.distances) if args.distances else None
    table = cluster_count_sweep(trajectories, args.k_values, eval_config(args, min(args.k_values)), d)
    table.to_csv(args.output, index=False, float_format="%.10g")
    logger.info(f"Balayage du nombre de clusters écrit: {args.output}")
    return EXIT_OK


def cmd_export(args):
    model = load_flow_model(args.model) if args.model else None
    trajectories = read_canonical(args.input, origin=model.origin if model else None) if args.input else []
    labels = labels_for(trajectories, args.labels).labels if args.labels and trajectories else None
    predictions = []
    if model is not None and args.predict:
        predictions = [predict(t, model, args.flags, args.completion) for t in trajectories]
    export_geojson(args.output, trajectories, labels, model, predictions, args.partition)
    return EXIT_OK


OUTPUT_DEFAULTS = {
    "ingest": "trajectories.csv",
    "synth": "trajectories.csv",
    "distances": "distances.bin",
    "cluster": "labels.csv",
    "fit": "model.json",
    "predict": "predictions.csv",
    "evaluate": "report",
    "sweep": "sweep.csv",
    "export": "flows.geojson",
}

COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "distances": cmd_distances,
    "cluster": cmd_cluster,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export": cmd_export,
}


# ============================================================
# PARSEUR
# ============================================================
class CliParser(argparse.ArgumentParser):
    """Les erreurs d'usage sortent avec le code 1 (2 est réservé aux erreurs de données)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: erreur: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _common(p):
    p.add_argument("--config", help="fichier clé = valeur reprenant les options longues")
    p.add_argument("--log-level")
    p.add_argument("--log-dir")
    p.add_argument("--workers", help="processus parallèles (joblib)")
    p.add_argument("--seed")


def _em(p):
    p.add_argument("--k-range", help="plage de k testée par le BIC, ex. 1..40")
    p.add_argument("--max-iter")
    p.add_argument("--tol")
    p.add_argument("--restarts")
    p.add_argument("--cov-floor", help="plancher des valeurs propres des covariances (m²)")
    p.add_argument("--bic-penalty", choices=["full", "bare"])
    p.add_argument("--smoothing", help="lissage de Laplace des tables de poids")


def build_parser():
    parser = CliParser(prog="flowcast", description="Flux de trajets GPS et prédiction de destination")
    sub = parser.add_subparsers(dest="command", metavar="COMMANDE")
    sub.required = True

    p = sub.add_parser("ingest", help="lit un jeu public et écrit le fichier canonique")
    _common(p)
    p.add_argument("--source", choices=["porto-csv", "cabspotting-dir"])
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--origin", help="station (caltrain, sao-bento) ou lon,lat")
    p.add_argument("--radius", help="rayon autour de l'origine (m)")
    p.add_argument("--bbox", help="lon_min,lat_min,lon_max,lat_max du point d'arrivée")
    p.add_argument("--min-points")
    p.add_argument("--max-points")
    p.add_argument("--timezone")
    p.add_argument("--sampling-interval", help="pas de temps Porto (s)")
    p.add_argument("--strict", action="store_const", const="true")

    p = sub.add_parser("synth", help="génère une ville synthétique")
    _common(p)
    p.add_argument("--output")
    p.add_argument("--labels", help="CSV des flux générateurs")
    p.add_argument("--flows")
    p.add_argument("--per-flow")
    p.add_argument("--waypoints")
    p.add_argument("--noise", help="bruit GPS σ (m)")
    p.add_argument("--step", help="pas d'échantillonnage (m)")

    p = sub.add_parser("distances", help="matrice des SSPD deux à deux")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--output")

    p = sub.add_parser("cluster", help="classification de Ward coupée en K clusters")
    _common(p)
    p.add_argument("--input", help="matrice de distances")
    p.add_argument("--trajectories", help="fichier canonique (identifiants)")
    p.add_argument("--k")
    p.add_argument("--output")

    p = sub.add_parser("fit", help="apprend les mélanges gaussiens et les tables de poids")
    _common(p)
    _em(p)
    p.add_argument("--input")
    p.add_argument("--labels")
    p.add_argument("--output")

    p = sub.add_parser("predict", help="prédit la destination de trajets partiels")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--input")
    p.add_argument("--completion")
    p.add_argument("--flags", help="none, all ou liste parmi emp,weekday,hour")
    p.add_argument("--rule")
    p.add_argument("--output")

    for name, text in (("evaluate", "validation croisée"), ("sweep", "balayage du nombre de clusters")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _em(p)
        p.add_argument("--input")
        p.add_argument("--distances", help="matrice précalculée (sinon recalculée)")
        p.add_argument("--folds")
        p.add_argument("--grid", help="complétions évaluées, ex. 0,0.5,1")
        p.add_argument("--fast", action="store_const", const="true")
        if name == "evaluate":
            p.add_argument("--k")
            p.add_argument("--output")
        else:
            p.add_argument("--k-values", help="valeurs de K, ex. 5..50")
            p.add_argument("--output")

    p = sub.add_parser("export", help="export GeoJSON")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--labels")
    p.add_argument("--model")
    p.add_argument("--predict", action="store_const", const="true")
    p.add_argument("--completion")
    p.add_argument("--flags")
    p.add_argument("--partition", action="store_const", const="true")
    p.add_argument("--output")
    return parser


def main(argv=None):
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code

    try:
        config = read_config(args.config) if args.config else {}
        resolve_options(args, config)
        if args.output is None:
            args.output = OUTPUT_DEFAULTS[args.command]
    except UsageError as e:
        sys.stderr.write(f"flowcast: erreur: {e}\n")
        return EXIT_USAGE

    setup_logging(args.log_dir, args.log_level)
    logger.info(f"flowcast {args.command} (graine {args.seed}, {args.workers} processus)")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        logger.error(f"Usage: {e}")
        return EXIT_USAGE
    except (ValueError, OSError, KeyError) as e:
        logger.error(f"Erreur de données: {e}\n{traceback.format_exc()}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
