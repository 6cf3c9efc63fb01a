"""
Experiment presets (main comparison, participation sweep, ablation,
similarity analysis), artifact writing and the summary report.
"""
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

import plots
from client import ClientHyper, ClientState, TrainingDivergedError
from convergence_monitor import MonitorConfig, MonitorError, monitor_client
from datagen import (
    Universe,
    UniverseConfig,
    derive_seed,
    generate_universe,
    load_universe,
    save_universe,
)
from encoders import (
    EncoderConfig,
    EncoderParams,
    PretrainConfig,
    init_pretrained,
    init_random,
    layer_tensors_from_flat,
    load_params,
    pretrain_supervised,
    save_params,
)
from evaluation import (
    MODE_PERSONALIZED,
    MODE_PRETRAINED,
    EvaluationConfig,
    MethodEvaluation,
    build_protocol,
    evaluate_clients,
)
from losses import (
    LossSettings,
    adaptive_soft_labels,
    cosine_matrix,
    hard_label_loss,
    intra_subject_loss,
    regularization_loss,
    representations_from_layers,
    resolve_k,
    total_loss,
)
from server import GlobalState, RoundConfig, run_federation
from tensor_core import Tensor, grad_check

DEFAULT_PRESET = "main"
DEFAULT_OUTPUT_DIR = "artifacts"
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
DEFAULT_SWEEP_RATES = (0.01, 0.1, 0.3, 0.5, 0.7)
DEFAULT_ABLATION_SETUPS = ("A", "B", "full")
DEFAULT_GRADCHECK_POINTS = 10

PRESETS = ("main", "sweep", "ablation", "similarity")
ABLATION_SETUPS = {
    "A": {"use_reg_loss": False, "use_adaptive_soft_label": False},
    "B": {"use_reg_loss": True, "use_adaptive_soft_label": False},
    "C": {"use_reg_loss": True, "use_adaptive_soft_label": True, "use_topk_gamma": False},
    "full": {"use_reg_loss": True, "use_adaptive_soft_label": True, "use_topk_gamma": True},
}
BASELINE_LABEL = "baseline"
METHOD_PRETRAINED = "pretrained"
METHOD_PERSONALIZED = "personalized"
METHOD_CENTRAL = "central"
METHOD_RANDOM = "random"
CENTRAL_SEED_TAG = 7001
RANDOM_SEED_TAG = 7002
INIT_SEED_TAG = 7003

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
HISTOGRAMS_FILE = "histograms.csv"
ROC_FILE = "roc.csv"
LOG_FILE = "experiment_log.json"
CONFIG_ECHO_FILE = "config.yaml"
METRICS_COLUMNS = ("preset", "label", "method", "seed", "client_id", "fpir", "tpir", "auroc")
HISTOGRAM_COLUMNS = ("label", "method", "seed", "bin_left", "bin_right", "positive", "negative")
ROC_COLUMNS = ("label", "method", "seed", "fpr", "tpr", "threshold")


class ExperimentError(Exception):
    """Base class for experiment driver errors."""


class ArtifactMissingError(ExperimentError):
    """Raised when a report is requested for a directory without artifacts."""


@dataclass(frozen=True)
class PresetConfig:
    seeds: tuple = DEFAULT_SEEDS
    sweep_rates: tuple = DEFAULT_SWEEP_RATES
    ablation_setups: tuple = DEFAULT_ABLATION_SETUPS
    include_central: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = DEFAULT_PRESET
    output_dir: str = DEFAULT_OUTPUT_DIR
    dataset: Optional[str] = None
    pretrained_params: Optional[str] = None
    parallelism: Optional[int] = None
    init_from_pretrained: bool = True
    emit_svg: bool = True
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    client: ClientHyper = field(default_factory=ClientHyper)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    presets: PresetConfig = field(default_factory=PresetConfig)


@dataclass(frozen=True)
class RunSpec:
    label: str
    method: str
    seed: int
    participation_rate: float
    loss: Optional[LossSettings] = None


@dataclass
class SeedContext:
    seed: int
    universe: Universe
    psi: EncoderParams
    protocol: object


@dataclass
class RunResult:
    spec: RunSpec
    evaluation: MethodEvaluation
    rounds: list = field(default_factory=list)
    convergence: Optional[dict] = None


def plan_runs(config: ExperimentConfig) -> list:
    """Every run of the preset, seeds outermost, in the order results are written."""
    if config.preset not in PRESETS:
        raise ExperimentError(f"Unknown preset {config.preset!r}; expected one of {PRESETS}")
    rate = config.rounds.participation_rate
    specs = []
    for seed in config.presets.seeds:
        specs.append(RunSpec(BASELINE_LABEL, METHOD_PRETRAINED, seed, rate))
        if config.preset == "main":
            specs.append(RunSpec("main", METHOD_PERSONALIZED, seed, rate, config.client.loss))
            if config.presets.include_central:
                specs.append(RunSpec("main", METHOD_CENTRAL, seed, rate))
        elif config.preset == "sweep":
            for sweep_rate in config.presets.sweep_rates:
                specs.append(
                    RunSpec(f"rate={sweep_rate}", METHOD_PERSONALIZED, seed, sweep_rate, config.client.loss)
                )
        elif config.preset == "ablation":
            for setup in config.presets.ablation_setups:
                if setup not in ABLATION_SETUPS:
                    raise ExperimentError(f"Unknown ablation setup {setup!r}")
                settings = replace(config.client.loss, **ABLATION_SETUPS[setup])
                specs.append(RunSpec(setup, METHOD_PERSONALIZED, seed, rate, settings))
        else:
            specs.append(RunSpec(BASELINE_LABEL, METHOD_RANDOM, seed, rate))
            specs.append(RunSpec("full", METHOD_PERSONALIZED, seed, rate, config.client.loss))
    return specs


def dry_run_plan(config: ExperimentConfig) -> str:
    lines = [f"preset: {config.preset}", f"output: {Path(config.output_dir) / config.preset}"]
    for spec in plan_runs(config):
        line = f"seed {spec.seed}: {spec.label}/{spec.method}"
        if spec.method == METHOD_PERSONALIZED:
            loss = spec.loss
            line += (
                f" rate={spec.participation_rate} rounds={config.rounds.total_rounds}"
                f" reg={loss.use_reg_loss} soft_label={loss.use_adaptive_soft_label}"
                f" topk_gamma={loss.use_topk_gamma}"
            )
        lines.append(line)
    return "\n".join(lines)


def load_or_generate_universe(config: ExperimentConfig, seed: int) -> Universe:
    if config.dataset:
        return load_universe(config.dataset)
    return generate_universe(replace(config.universe, seed=seed))


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedContext:
    universe = load_or_generate_universe(config, seed)
    if config.pretrained_params:
        psi = load_params(config.pretrained_params)
    elif universe.public_pool:
        psi = init_pretrained(seed, config.encoder, universe.public_pool, config.pretrain)
    else:
        raise ExperimentError(
            "The dataset has no public pool; set pretrained_params to a saved encoder."
        )
    if psi.config.input_dim != universe.input_dim:
        raise ExperimentError(
            f"Encoder input_dim {psi.config.input_dim} does not match dataset dim {universe.input_dim}"
        )
    protocol = build_protocol(universe.clients, universe.impostors, config.evaluation.enroll_fraction)
    return SeedContext(seed, universe, psi, protocol)


def make_client_states(universe: Universe, init: EncoderParams, hyper: ClientHyper) -> list:
    return [
        ClientState(client_id=d.client_id, w_c=init, theta_c=init, dataset=d, hyper=hyper)
        for d in universe.clients
    ]


def _initial_params(config: ExperimentConfig, context: SeedContext) -> EncoderParams:
    if config.init_from_pretrained:
        return context.psi
    return init_random(context.psi.config, derive_seed(context.seed, INIT_SEED_TAG))


async def execute_run(spec: RunSpec, context: SeedContext, config: ExperimentConfig) -> RunResult:
    universe, psi = context.universe, context.psi

    def evaluate(states, params, mode):
        return evaluate_clients(
            states, params, context.protocol, mode, config.evaluation, spec.seed
        )

    if spec.method != METHOD_PERSONALIZED:
        states = make_client_states(universe, psi, config.client)
        if spec.method == METHOD_PRETRAINED:
            params = psi
        elif spec.method == METHOD_CENTRAL:
            pooled = {d.identity_id: d.train for d in universe.clients}
            params = pretrain_supervised(
                psi, pooled, config.pretrain, derive_seed(spec.seed, CENTRAL_SEED_TAG)
            )
        else:
            params = init_random(psi.config, derive_seed(spec.seed, RANDOM_SEED_TAG))
        return RunResult(spec, evaluate(states, params, MODE_PRETRAINED))

    hyper = replace(config.client, loss=spec.loss)
    init = _initial_params(config, context)
    states = make_client_states(universe, init, hyper)
    global_state = GlobalState(w_g=init)
    round_config = replace(config.rounds, participation_rate=spec.participation_rate, seed=spec.seed)
    logging.info("Run %s/%s seed %d", spec.label, spec.method, spec.seed)
    rounds = await run_federation(
        global_state, states, psi, round_config, parallelism=config.parallelism
    )

    convergence = None
    if config.monitor.enabled:
        by_id = {s.client_id: s for s in states}
        client_id = config.monitor.client_id or min(by_id)
        if client_id not in by_id:
            raise MonitorError(f"Monitored client {client_id} is not registered.")
        convergence = monitor_client(
            by_id[client_id],
            global_state.w_g,
            psi,
            config.monitor,
            derive_seed(spec.seed, global_state.round_index, client_id),
        )
    return RunResult(
        spec,
        evaluate(states, psi, MODE_PERSONALIZED),
        [r.to_dict() for r in rounds],
        convergence,
    )


async def run_preset(config: ExperimentConfig) -> Path:
    """Run every planned run and write artifacts to <output_dir>/<preset>."""
    started = time.perf_counter()
    run_dir = Path(config.output_dir) / config.preset
    run_dir.mkdir(parents=True, exist_ok=True)
    results, contexts = [], {}
    try:
        for spec in plan_runs(config):
            if spec.seed not in contexts:
                contexts = {spec.seed: prepare_seed(config, spec.seed)}
            results.append(await execute_run(spec, contexts[spec.seed], config))
    except TrainingDivergedError as error:
        logging.error("Run diverged, writing partial artifacts: %s", error)
        write_artifacts(run_dir, config, results, time.perf_counter() - started, str(error))
        raise
    write_artifacts(run_dir, config, results, time.perf_counter() - started)
    return run_dir


def _number(value) -> str:
    return "" if value is None else repr(float(value))


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def metric_rows(preset: str, results) -> list:
    rows = []
    for result in results:
        spec = result.spec
        for scores in result.evaluation.clients:
            for fpir, tpir in scores.tpir.items():
                rows.append(
                    {
                        "preset": preset,
                        "label": spec.label,
                        "method": spec.method,
                        "seed": spec.seed,
                        "client_id": scores.client_id,
                        "fpir": _number(fpir),
                        "tpir": _number(tpir),
                        "auroc": _number(scores.auroc),
                    }
                )
    return rows


def _median(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def summarize(results, fpir_points) -> list:
    """One row per (label, method) with medians over seeds."""
    grouped = {}
    for result in results:
        grouped.setdefault((result.spec.label, result.spec.method), []).append(result)
    rows = []
    for (label, method), group in grouped.items():
        evaluations = [r.evaluation for r in group]
        rows.append(
            {
                "label": label,
                "method": method,
                "seeds": [r.spec.seed for r in group],
                "auroc": _median(e.mean_auroc for e in evaluations),
                "tpir": {str(f): _median(e.mean_tpir(f) for e in evaluations) for f in fpir_points},
                "overlap": _median(e.histograms.overlap for e in evaluations if e.histograms),
                "intra_class_variance": _median(e.intra_class_variance for e in evaluations),
            }
        )
    return rows


def _histogram_rows(results) -> list:
    rows = []
    for result in results:
        hist = result.evaluation.histograms
        if hist is None:
            continue
        for i in range(len(hist.positive)):
            rows.append(
                {
                    "label": result.spec.label,
                    "method": result.spec.method,
                    "seed": result.spec.seed,
                    "bin_left": _number(hist.edges[i]),
                    "bin_right": _number(hist.edges[i + 1]),
                    "positive": _number(hist.positive[i]),
                    "negative": _number(hist.negative[i]),
                }
            )
    return rows


def _roc_rows(results, curves) -> list:
    rows = []
    for result in results:
        fpr, tpr, thresholds = curves[id(result)]
        for x, y, threshold in zip(fpr, tpr, thresholds):
            rows.append(
                {
                    "label": result.spec.label,
                    "method": result.spec.method,
                    "seed": result.spec.seed,
                    "fpr": _number(x),
                    "tpr": _number(y),
                    "threshold": _number(threshold),
                }
            )
    return rows


def write_artifacts(run_dir: Path, config, results, wall_time: float, error: Optional[str] = None):
    curves = {id(r): r.evaluation.roc_points() for r in results if r.evaluation.clients}
    results = [r for r in results if r.evaluation.clients]
    (run_dir / CONFIG_ECHO_FILE).write_text(dump_config(config), encoding="utf-8")
    _write_csv(run_dir / METRICS_FILE, METRICS_COLUMNS, metric_rows(config.preset, results))
    _write_csv(run_dir / HISTOGRAMS_FILE, HISTOGRAM_COLUMNS, _histogram_rows(results))
    _write_csv(run_dir / ROC_FILE, ROC_COLUMNS, _roc_rows(results, curves))

    summary = {
        "preset": config.preset,
        "fpir_points": list(config.evaluation.fpir_points),
        "rows": summarize(results, config.evaluation.fpir_points),
    }
    (run_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")

    log = {
        "preset": config.preset,
        "wall_time_seconds": wall_time,
        "error": error,
        "runs": [
            {
                "label": r.spec.label,
                "method": r.spec.method,
                "seed": r.spec.seed,
                "rounds": r.rounds,
                "convergence": r.convergence,
            }
            for r in results
        ],
    }
    (run_dir / LOG_FILE).write_text(json.dumps(log, indent=2) + "\n", encoding="utf-8")

    if config.emit_svg and results:
        first_seed = results[0].spec.seed
        shown = [r for r in results if r.spec.seed == first_seed]
        names = {id(r): f"{r.spec.label}/{r.spec.method}" for r in shown}
        plots.write_svg(
            run_dir / "roc.svg", plots.roc_svg({names[id(r)]: curves[id(r)][:2] for r in shown})
        )
        plots.write_svg(
            run_dir / "histograms.svg",
            plots.histogram_svg({names[id(r)]: r.evaluation.histograms for r in shown}),
        )
    logging.info("Wrote artifacts to %s", run_dir)


def _format(value, width=8) -> str:
    return f"{value:>{width}.4f}" if value is not None else f"{'n/a':>{width}}"


def report(artifact_dir) -> str:
    """Per-method AUROC and TPIR@FPIR table from summary.json."""
    path = Path(artifact_dir) / SUMMARY_FILE
    if not path.is_file():
        raise ArtifactMissingError(f"Missing artifact: {path}")
    try:
        summary = json.loads(path.read_text(encoding="utf-8"))
        rows, fpirs = summary["rows"], summary["fpir_points"]
    except (json.JSONDecodeError, KeyError, TypeError) as error:
        raise ArtifactMissingError(f"Unreadable artifact {path}: {error}") from error

    reference = next(
        (r["auroc"] for r in rows if r["method"] == METHOD_PRETRAINED and r["auroc"]), None
    )
    show_baseline = summary.get("preset") in ("main", "similarity")
    header = f"{'setting':<14}{'method':<14}{'AUROC':>8}{'dAUROC%':>9}" + "".join(
        f"{'TPIR@' + str(f):>12}" for f in fpirs
    )
    lines = []
    if reference is not None and not show_baseline:
        lines.append(f"pretrained reference AUROC {reference:.4f}")
    lines.extend([header, "-" * len(header)])
    for row in rows:
        if row["label"] == BASELINE_LABEL and row["method"] == METHOD_PRETRAINED and not show_baseline:
            continue
        delta = (
            100.0 * (row["auroc"] - reference) / reference
            if reference is not None and row["auroc"] is not None
            else None
        )
        lines.append(
            f"{row['label']:<14}{row['method']:<14}{_format(row['auroc'])}{_format(delta, 9)}"
            + "".join(_format(row["tpir"].get(str(f)), 12) for f in fpirs)
        )
    return "\n".join(lines)


def generate_dataset(config: ExperimentConfig, path) -> Path:
    return save_universe(generate_universe(config.universe), path)


def pretrain_encoder(config: ExperimentConfig, path) -> tuple:
    seed = config.universe.seed
    universe = load_or_generate_universe(config, seed)
    if not universe.public_pool:
        raise ExperimentError("The dataset has no public pool to pre-train on.")
    encoder = replace(config.encoder, input_dim=universe.input_dim)
    psi = init_pretrained(seed, encoder, universe.public_pool, config.pretrain)
    return save_params(psi, path)


def _total_loss_of_w(psi, w, theta, batch, settings: LossSettings):
    """Total loss over flat w with the soft labels frozen at w."""
    config = w.config
    n = len(batch)
    at_w = representations_from_layers(psi, w.tensors(), theta.tensors(), batch, config)
    labels = adaptive_soft_labels(
        at_w.z, at_w.v, resolve_k(settings.k, n, settings.k_as_ratio), settings.gamma, settings.exponent_t
    )

    def loss(flat: Tensor) -> Tensor:
        reps = representations_from_layers(
            psi, layer_tensors_from_flat(flat, config), theta.tensors(), batch, config
        )
        insub = intra_subject_loss(cosine_matrix(reps.z, reps.v), labels)
        return total_loss(insub, regularization_loss(reps.r_pre, reps.q_pre), settings.lam)

    return loss


def run_gradient_checks(seed: int = 0, points: int = DEFAULT_GRADCHECK_POINTS, settings=None) -> dict:
    """
    Finite-difference checks of every loss at seeded random points. Soft labels
    are held fixed at the point, as in training. Returns the worst relative
    error per loss.
    """
    settings = settings or LossSettings()
    config = EncoderConfig(input_dim=5, hidden_dims=(6,), embed_dim=3)
    worst = {"hard_label": 0.0, "intra_subject": 0.0, "regularization": 0.0, "total": 0.0}
    for point in range(points):
        rng = np.random.default_rng(derive_seed(seed, point))
        n = int(rng.integers(3, 7))
        batch = rng.normal(size=(n, config.input_dim))
        psi, w, theta = (init_random(config, rng) for _ in range(3))
        z = rng.normal(size=(n, 2 * config.embed_dim))
        v = Tensor(rng.normal(size=(n, config.embed_dim)))
        r_pre = rng.normal(size=(n, config.pre_final_dim))
        q_pre = Tensor(rng.normal(size=(n, config.pre_final_dim)))
        labels = adaptive_soft_labels(
            z, v, resolve_k(settings.k, n, settings.k_as_ratio), settings.gamma, settings.exponent_t
        )

        checks = {
            "hard_label": (lambda x: hard_label_loss(cosine_matrix(x, v)), z),
            "intra_subject": (lambda x: intra_subject_loss(cosine_matrix(x, v), labels), z),
            "regularization": (lambda x: regularization_loss(x, q_pre), r_pre),
            "total": (_total_loss_of_w(psi, w, theta, batch, settings), w.flatten()),
        }
        for name, (loss, x) in checks.items():
            worst[name] = max(worst[name], grad_check(loss, x))
        logging.debug("Gradient check point %d: %s", point, worst)
    return worst


def _plain(value):
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_mapping(config: ExperimentConfig) -> dict:
    """Nested mapping in the layout of config.yaml; loads back to the same config."""
    loss = config.client.loss
    return _plain(
        {
            "preset": config.preset,
            "output_dir": str(config.output_dir),
            "dataset": config.dataset,
            "pretrained_params": config.pretrained_params,
            "parallelism": config.parallelism,
            "init_from_pretrained": config.init_from_pretrained,
            "emit_svg": config.emit_svg,
            "universe": asdict(config.universe),
            "encoder": asdict(config.encoder),
            "pretrain": asdict(config.pretrain),
            "client": {
                "learning_rate": config.client.learning_rate,
                "local_epochs": config.client.local_epochs,
                "batch_size": config.client.batch_size,
            },
            "loss": {
                "lambda": loss.lam,
                "k": loss.k,
                "k_as_ratio": loss.k_as_ratio,
                "gamma": loss.gamma,
                "exponent_t": loss.exponent_t,
                "use_reg_loss": loss.use_reg_loss,
                "use_adaptive_soft_label": loss.use_adaptive_soft_label,
                "use_topk_gamma": loss.use_topk_gamma,
            },
            "rounds": {
                "total_rounds": config.rounds.total_rounds,
                "participation_rate": config.rounds.participation_rate,
            },
            "evaluation": asdict(config.evaluation),
            "monitor": asdict(config.monitor),
            "presets": asdict(config.presets),
        }
    )


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_mapping(config), sort_keys=False)
