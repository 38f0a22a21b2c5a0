"""``sia-lab`` command line: seeded configs in, self-describing run directories out.

Every command reads one JSON config, validates it against a strict schema
(unknown keys are rejected) and writes a run directory::

    config.json     resolved config; re-running it reproduces the directory
    manifest.json   command, package version, dataset manifest
    report.json     metrics (schema_version'd, deterministic)
    histogram.csv   sensitivity histogram (diagnose)
    traces/         per-sample attack traces (JSON, optional binary frames)
    adversaries/    adversarial images (float32 .npy, 8-bit PNG per sample) and their index
    plots/          optional PNGs (--plots)

Exit codes: 0 ok, 2 schema violation, 3 missing input, 4 numeric failure.
All sub-seeds (dataset, target, attacks, strategies) equal the top-level seed;
each consumer keys its own RNG stream, so the streams stay independent.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .attack import AttackConfig, AttackMode, run_attack_batch, save_trace_json, write_image_trajectory
from .diagnosis import export_histogram, sensitivity, single_attribute_sensitivity, top_k
from .diffcore import NumericError
from .metrics import MetricResult, attack_success_rate, psnr, ssim, write_report
from .robustify import (TrainingPlan, adversarial_finetune, compare_strategies, make_imbalanced,
                        robustness_matrix, write_strategy_csv)
from .toyworld import (LabelRule, generate_dataset, load_checkpoint, load_dataset, save_checkpoint,
                       save_dataset, train_classifier, train_keypoint_detector)
from .toyworld.targets import CLASSIFIER

log = logging.getLogger("sia_lab")

EXIT_OK, EXIT_SCHEMA, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("gen-data", "train-target", "attack", "diagnose", "advtrain", "augment", "report")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class MissingInput(FileNotFoundError):
    pass


# --- schema -------------------------------------------------------------------

class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetParams(Strict):
    K: int = Field(6, ge=2)
    N: int = Field(1300, ge=1)
    image_size: tuple[int, int, int] = (32, 32, 3)
    label_attribute: int = Field(0, ge=0)
    label_threshold: float = 0.5
    amplitude: float = Field(0.35, gt=0)
    primary_gain: float = Field(1.0, gt=0)
    noise: float = Field(0.02, ge=0)
    n_keypoints: int = Field(2, ge=1)
    spurious: list[float] | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.label_attribute >= self.K:
            raise ValueError("label_attribute must be < K")
        if self.spurious is not None and len(self.spurious) != self.K - 1:
            raise ValueError("spurious needs K-1 entries")
        return self


class DataSpec(Strict):
    path: str | None = None
    generate: DatasetParams | None = None
    train_count: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.generate is None):
            raise ValueError("give exactly one of 'path' or 'generate'")
        return self


class TargetParams(Strict):
    kind: Literal["classifier", "keypoint"] = "classifier"
    epochs: int | None = Field(None, ge=0)
    lr: float = Field(1.0, gt=0)
    hidden: int = Field(16, ge=1)
    pool: int = Field(4, ge=1)
    weight_decay: float = Field(1e-3, ge=0)
    kernel: int = Field(5, ge=1)
    sigma: float = Field(1.5, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)


class TargetSpec(Strict):
    checkpoint: str | None = None
    train: TargetParams | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.checkpoint is None) == (self.train is None):
            raise ValueError("give exactly one of 'checkpoint' or 'train'")
        return self


class AttackParams(Strict):
    eta_a: float = Field(0.25 / 255, ge=0)
    eta_x: float = Field(0.25 / 255, ge=0)
    eps_a: float = Field(1.0, ge=0)
    eps_x: float = Field(1.5 / 255, ge=0)
    T: int = Field(200, ge=0)
    mode: str = "FULL"
    frozen_attr_caps: dict[int, float] = Field(default_factory=dict)
    partial_iters: int | None = Field(None, ge=0)

    @model_validator(mode="after")
    def _check(self):
        try:
            self.mode = AttackMode.parse(self.mode).name
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        if any(v < 0 for v in self.frozen_attr_caps.values()):
            raise ValueError("attribute caps must be non-negative")
        if self.partial_iters is not None and self.partial_iters > self.T:
            raise ValueError("partial_iters must not exceed T")
        return self

    def build(self, seed: int) -> AttackConfig:
        return AttackConfig(**self.model_dump(), seed=seed)


class SliceSpec(Strict):
    start: int = Field(0, ge=0)
    stop: int | None = Field(None, ge=0)


class GenDataConfig(Strict):
    seed: int
    dataset: DatasetParams = DatasetParams()


class TrainTargetConfig(Strict):
    seed: int
    data: DataSpec
    target: TargetParams = TargetParams()


class AttackCommandConfig(Strict):
    seed: int
    data: DataSpec
    target: TargetSpec
    kind: Literal["sia", "pgd", "fgsm"] = "sia"
    attack: AttackParams = AttackParams()
    slice: SliceSpec = SliceSpec()
    record_images: bool = False


class DiagnoseConfig(Strict):
    seed: int
    data: DataSpec
    target: TargetSpec
    attack: AttackParams = AttackParams()
    slice: SliceSpec = SliceSpec()
    exclude: list[int] = Field(default_factory=list)
    single_attribute: bool = False
    save_traces: bool = True


class FinetuneParams(Strict):
    epochs: int = Field(1, ge=0)
    lr: float | None = Field(None, gt=0)
    batch_size: int = Field(16, ge=1)


class EvalAttack(Strict):
    kind: Literal["clean", "sia", "pgd", "fgsm"]
    attack: AttackParams | None = None


class AdvtrainConfig(Strict):
    seed: int
    data: DataSpec
    target: TargetSpec
    train_attack: AttackParams = AttackParams()
    finetune: FinetuneParams = FinetuneParams()
    eval_attacks: dict[str, EvalAttack] = Field(
        default_factory=lambda: {"clean": EvalAttack(kind="clean")})
    diagnosis: AttackParams | None = None
    diagnosis_exclude: list[int] = Field(default_factory=list)
    slice: SliceSpec = SliceSpec()


class ImbalanceParams(Strict):
    positive_fraction: float = Field(0.01, ge=0, le=1)
    total: int = Field(2000, ge=2)


class PlanParams(Strict):
    strategy: Literal["none", "reweight", "resample", "cutmix", "sia_augment",
                      "sia_augment_reweight"]
    epochs: int = Field(300, ge=0)
    lr: float = Field(1.0, gt=0)
    augmentation_count: int = Field(0, ge=0)
    weight_decay: float = Field(1e-3, ge=0)
    cutmix_probability: float = Field(0.5, ge=0, le=1)
    cutmix_alpha: float = Field(1.0, gt=0)
    minority_oversample: bool = True


class AugmentConfig(Strict):
    seed: int
    data: DataSpec
    imbalance: ImbalanceParams = ImbalanceParams()
    strategies: list[PlanParams] = Field(min_length=1)
    attack: AttackParams = AttackParams()
    hidden: int = Field(16, ge=1)


class ReportConfig(Strict):
    seed: int
    runs: list[str] = Field(min_length=1)


SCHEMAS = {"gen-data": GenDataConfig, "train-target": TrainTargetConfig,
           "attack": AttackCommandConfig, "diagnose": DiagnoseConfig,
           "advtrain": AdvtrainConfig, "augment": AugmentConfig, "report": ReportConfig}


def parse_config(command: str, raw: dict, seed: int | None = None) -> Strict:
    """Validate ``raw`` against the command's schema; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if seed is not None:
        raw = dict(raw, seed=seed)
    try:
        return SCHEMAS[command].model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(path, err["msg"]) from None


def resolved(cfg: Strict) -> dict:
    return cfg.model_dump(mode="json")


def config_digest(cfg: Strict) -> str:
    return hashlib.sha256(json.dumps(resolved(cfg), sort_keys=True).encode()).hexdigest()


# --- shared plumbing ------------------------------------------------------------

def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _check_inputs(cfg: Strict) -> None:
    """Fail with exit 3 before any output exists."""
    data = getattr(cfg, "data", None)
    if data is not None and data.path is not None:
        _require(Path(data.path) / "manifest.json", "dataset")
    target = getattr(cfg, "target", None)
    if isinstance(target, TargetSpec) and target.checkpoint is not None:
        _require(target.checkpoint, "checkpoint")
    if isinstance(cfg, ReportConfig):
        for run in cfg.runs:
            _require(Path(run) / "report.json", "run report")


def _load_data(spec: DataSpec, seed: int):
    if spec.path is not None:
        dataset = load_dataset(spec.path)
    else:
        g = spec.generate
        dataset = generate_dataset(g.K, g.N, g.image_size,
                                   LabelRule(g.label_attribute, g.label_threshold), seed,
                                   g.amplitude, g.primary_gain, g.noise, g.n_keypoints,
                                   g.spurious)
    if spec.train_count is None:
        return dataset, dataset, dataset
    if spec.train_count >= len(dataset):
        raise ConfigError("data.train_count", f"must be < dataset size {len(dataset)}")
    train, evaluation = dataset.split(spec.train_count)
    return dataset, train, evaluation


def _check_against_data(cfg: Strict, dataset) -> None:
    """Semantic checks that need the dataset (attribute indices, slices)."""
    k = dataset.basis.K
    for name in ("attack", "train_attack", "diagnosis"):
        params = getattr(cfg, name, None)
        if isinstance(params, AttackParams):
            for idx in params.frozen_attr_caps:
                if not 0 <= idx < k:
                    raise ConfigError(f"{name}.frozen_attr_caps.{idx}", f"index out of range for K={k}")
    for name in ("exclude", "diagnosis_exclude"):
        for j, idx in enumerate(getattr(cfg, name, []) or []):
            if not 0 <= idx < k:
                raise ConfigError(f"{name}.{j}", f"index out of range for K={k}")
    for name, ev in (getattr(cfg, "eval_attacks", None) or {}).items():
        if ev.kind != "clean" and ev.attack is None:
            raise ConfigError(f"eval_attacks.{name}.attack", "required for non-clean attacks")


def _train_target(params: TargetParams, train, seed: int):
    if params.kind == "classifier":
        return train_classifier(train, 300 if params.epochs is None else params.epochs,
                                params.lr, seed, params.hidden, params.pool, params.weight_decay)
    return train_keypoint_detector(train, 2000 if params.epochs is None else params.epochs,
                                   params.lr, params.sigma, seed, params.kernel, params.momentum)


def _load_target(spec: TargetSpec, train, seed: int):
    if spec.checkpoint is not None:
        return load_checkpoint(spec.checkpoint)
    return _train_target(spec.train, train, seed)


def _slice(spec: SliceSpec, n: int, path: str = "slice") -> list[int]:
    stop = n if spec.stop is None else min(spec.stop, n)
    if spec.start >= stop:
        raise ConfigError(path, f"empty slice [{spec.start}, {stop}) of {n} samples")
    return list(range(spec.start, stop))


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _start_run(out: Path, command: str, cfg: Strict, dataset=None, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved(cfg))
    manifest = {"command": command, "version": __version__, "config_sha256": config_digest(cfg),
                "dataset": None if dataset is None else dataset.manifest, **(extra or {})}
    _write_json(out / "manifest.json", manifest)


def _report(out: Path, command: str, cfg: Strict, metrics: list[MetricResult], extra=None):
    doc = {"command": command, "seed": cfg.seed, "config_sha256": config_digest(cfg)}
    doc.update(extra or {})
    return write_report(out / "report.json", metrics, doc)


def _save_adversaries(out: Path, results) -> None:
    adv_dir = out / "adversaries"
    adv_dir.mkdir(parents=True, exist_ok=True)
    np.save(adv_dir / "adversaries.npy",
            np.stack([r[0].adversary for r in results]).astype("<f4"))
    with open(adv_dir / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["row", "sample", "success"])
        for row, (ex, _) in enumerate(results):
            writer.writerow([row, ex.source_index, int(ex.success)])
    for ex, _ in results:
        pixels = np.clip(np.rint(ex.adversary * 255), 0, 255).astype(np.uint8)
        Image.fromarray(pixels.squeeze()).save(adv_dir / f"{ex.source_index:06d}.png")


def _save_traces(out: Path, results, names, record_images: bool) -> None:
    for ex, trace in results:
        if trace is None:
            continue
        stem = out / "traces" / f"{ex.source_index:06d}"
        save_trace_json(stem.with_suffix(".json"), trace, ex.source_index, ex.success, names)
        if record_images and trace.images is not None:
            write_image_trajectory(stem.with_suffix(".siat"), trace.images)


def _quality(results, dataset) -> list[MetricResult]:
    originals = dataset.subset([r[0].source_index for r in results]).images()
    advs = [r[0].adversary for r in results]
    n = len(advs)
    return [MetricResult("psnr", float(np.mean([psnr(a, o) for a, o in zip(advs, originals)])), n),
            MetricResult("ssim", float(np.mean([ssim(a, o) for a, o in zip(advs, originals)])), n)]


# --- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg: GenDataConfig, out: Path, plots: bool = False, workers: int = 1):
    g = cfg.dataset
    dataset = generate_dataset(g.K, g.N, g.image_size,
                               LabelRule(g.label_attribute, g.label_threshold), cfg.seed,
                               g.amplitude, g.primary_gain, g.noise, g.n_keypoints, g.spurious)
    _start_run(out, "gen-data", cfg, dataset)
    save_dataset(dataset, out / "dataset")
    labels = dataset.labels()
    metrics = [MetricResult("samples", float(len(dataset)), len(dataset)),
               MetricResult("positive_fraction", float(labels.mean()), len(dataset))]
    if plots:
        _plot_samples(dataset, out / "plots" / "samples.png")
    return _report(out, "gen-data", cfg, metrics, {"warnings": dataset.manifest["warnings"]})


def cmd_train_target(cfg: TrainTargetConfig, out: Path, plots: bool = False, workers: int = 1):
    dataset, train, evaluation = _load_data(cfg.data, cfg.seed)
    model = _train_target(cfg.target, train, cfg.seed)
    _start_run(out, "train-target", cfg, dataset)
    save_checkpoint(model, out / "model.siam", {"seed": cfg.seed, "training": resolved(cfg)})
    metrics = []
    for split, part in (("train", train), ("eval", evaluation)):
        images = part.images()
        if model.kind == CLASSIFIER:
            acc = float(np.mean(model.predict(images) == part.labels()))
            metrics.append(MetricResult(f"{split}_accuracy", acc, len(part)))
        else:
            err = float(np.mean(model.keypoint_error(images, part.keypoints())))
            metrics.append(MetricResult(f"{split}_keypoint_error", err, len(part)))
    return _report(out, "train-target", cfg, metrics)


def cmd_attack(cfg: AttackCommandConfig, out: Path, plots: bool = False, workers: int = 1):
    dataset, train, evaluation = _load_data(cfg.data, cfg.seed)
    _check_against_data(cfg, dataset)
    indices = _slice(cfg.slice, len(evaluation))
    model = _load_target(cfg.target, train, cfg.seed)
    attack = cfg.attack.build(cfg.seed)
    _start_run(out, "attack", cfg, dataset)
    results = run_attack_batch(model, evaluation.generator, evaluation, attack, cfg.kind, indices,
                               workers, record_images=cfg.record_images)
    _save_adversaries(out, results)
    _save_traces(out, results, evaluation.attribute_names, cfg.record_images)
    gts = [(evaluation.samples[i].keypoints if model.kind != CLASSIFIER
            else evaluation.samples[i].label) for i in indices]
    asr = attack_success_rate(model, [r[0].adversary for r in results], gts)
    metrics = [MetricResult("attack_success_rate", asr, len(results),
                            {"kind": cfg.kind, "mode": attack.mode.name})]
    metrics += _quality(results, evaluation)
    if plots:
        _plot_pairs(evaluation, results, out / "plots" / "adversaries.png")
    return _report(out, "attack", cfg, metrics)


def cmd_diagnose(cfg: DiagnoseConfig, out: Path, plots: bool = False, workers: int = 1):
    dataset, train, evaluation = _load_data(cfg.data, cfg.seed)
    _check_against_data(cfg, dataset)
    indices = _slice(cfg.slice, len(evaluation))
    model = _load_target(cfg.target, train, cfg.seed)
    attack = cfg.attack.build(cfg.seed)
    _start_run(out, "diagnose", cfg, dataset)
    results = run_attack_batch(model, evaluation.generator, evaluation, attack, "sia", indices,
                               workers)
    if cfg.save_traces:
        _save_traces(out, results, evaluation.attribute_names, False)
    report = sensitivity([r[1] for r in results], evaluation.attribute_names, cfg.exclude)
    export_histogram(report, out, plot=False)
    if plots:
        export_histogram(report, out / "plots", plot=True)
        (out / "plots" / "histogram.csv").unlink()
    n = len(results)
    metrics = [MetricResult("sdar", report.sdar, n),
               MetricResult("attack_success_rate", float(np.mean([r[0].success for r in results])), n)]
    extra = {"sensitivity": report.as_dict(), "top_1": top_k(report, 1)[0]}
    if cfg.single_attribute:
        single = single_attribute_sensitivity(model, evaluation.generator, evaluation, attack,
                                              indices, workers)
        extra["single_attribute"] = single.as_dict()
        extra["single_attribute_top_1"] = top_k(single, 1)[0]
    return _report(out, "diagnose", cfg, metrics, extra)


def cmd_advtrain(cfg: AdvtrainConfig, out: Path, plots: bool = False, workers: int = 1):
    dataset, train, evaluation = _load_data(cfg.data, cfg.seed)
    _check_against_data(cfg, dataset)
    indices = _slice(cfg.slice, len(evaluation))
    model = _load_target(cfg.target, train, cfg.seed)
    if model.kind != CLASSIFIER:
        raise ConfigError("target", "adversarial training needs a classifier")
    _start_run(out, "advtrain", cfg, dataset)
    train_cfg = cfg.train_attack.build(cfg.seed)
    results = run_attack_batch(model, train.generator, train, train_cfg, "sia", None, workers)
    adversaries = np.stack([r[0].adversary for r in results])
    ft = cfg.finetune
    tuned = adversarial_finetune(model, adversaries, train.labels(), ft.epochs, ft.lr, cfg.seed,
                                 ft.batch_size)
    save_checkpoint(tuned, out / "finetuned.siam", {"seed": cfg.seed})
    models = {"original": model, "finetuned": tuned}
    attacks = {name: (ev.kind, None if ev.attack is None else ev.attack.build(cfg.seed))
               for name, ev in cfg.eval_attacks.items()}
    matrix = robustness_matrix(models, attacks, evaluation, evaluation.generator, indices, workers)
    matrix.to_csv(out / "robustness.csv")
    metrics = [MetricResult(f"accuracy/{row}/{col}", matrix.cell(row, col), len(indices))
               for row in matrix.rows for col in matrix.columns]
    extra = {}
    if cfg.diagnosis is not None:
        diag = cfg.diagnosis.build(cfg.seed)
        for name, m in models.items():
            res = run_attack_batch(m, evaluation.generator, evaluation, diag, "sia", indices,
                                   workers)
            rep = sensitivity([r[1] for r in res], evaluation.attribute_names,
                              cfg.diagnosis_exclude)
            metrics.append(MetricResult(f"sdar/{name}", rep.sdar, len(indices)))
            extra[f"sensitivity/{name}"] = rep.as_dict()
    return _report(out, "advtrain", cfg, metrics, extra)


def cmd_augment(cfg: AugmentConfig, out: Path, plots: bool = False, workers: int = 1):
    dataset, pool, test = _load_data(cfg.data, cfg.seed)
    _check_against_data(cfg, dataset)
    imb = cfg.imbalance
    try:
        train = make_imbalanced(pool, imb.positive_fraction, imb.total, cfg.seed)
    except ValueError as exc:
        raise ConfigError("imbalance", str(exc)) from None
    _start_run(out, "augment", cfg, dataset)
    plans = [TrainingPlan(seed=cfg.seed, **p.model_dump()) for p in cfg.strategies]
    results = compare_strategies(train, test, plans, train.generator, cfg.attack.build(cfg.seed),
                                 workers, cfg.hidden)
    write_strategy_csv(results, out / "strategies.csv")
    metrics = []
    for r in results:
        for key in ("precision", "recall", "accuracy", "balanced_accuracy"):
            metrics.append(MetricResult(f"{key}/{r.strategy}", float(getattr(r, key)), len(test),
                                        {"train_size": r.train_size}))
    return _report(out, "augment", cfg, metrics)


def cmd_report(cfg: ReportConfig, out: Path, plots: bool = False, workers: int = 1):
    """Merge the ``report.json`` of several runs into ``report.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved(cfg))
    rows, runs = [], []
    for run in cfg.runs:
        doc = json.loads((Path(run) / "report.json").read_text())
        label = Path(run).name
        runs.append({"run": label, "command": doc.get("command"), "seed": doc.get("seed")})
        for m in doc.get("metrics", []):
            rows.append([label, doc.get("command"), m["name"], repr(float(m["value"])), m["count"]])
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["run", "command", "metric", "value", "count"])
        writer.writerows(rows)
    metrics = [MetricResult(f"{r[0]}/{r[2]}", float(r[3]), int(r[4])) for r in rows]
    return _report(out, "report", cfg, metrics, {"runs": runs})


HANDLERS = {"gen-data": cmd_gen_data, "train-target": cmd_train_target, "attack": cmd_attack,
            "diagnose": cmd_diagnose, "advtrain": cmd_advtrain, "augment": cmd_augment,
            "report": cmd_report}


# --- plots ------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_samples(dataset, path: Path, n: int = 8) -> None:
    plt = _pyplot()
    path.parent.mkdir(parents=True, exist_ok=True)
    images = dataset.subset(range(min(n, len(dataset)))).images()
    fig, axes = plt.subplots(1, len(images), figsize=(1.5 * len(images), 1.8), squeeze=False)
    for ax, img, s in zip(axes[0], images, dataset.samples):
        ax.imshow(img.squeeze(), vmin=0, vmax=1)
        ax.set_title(f"y={s.label}", fontsize=7)
        ax.axis("off")
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_pairs(dataset, results, path: Path, n: int = 6) -> None:
    plt = _pyplot()
    path.parent.mkdir(parents=True, exist_ok=True)
    chosen = results[:n]
    originals = dataset.subset([r[0].source_index for r in chosen]).images()
    fig, axes = plt.subplots(2, len(chosen), figsize=(1.5 * len(chosen), 3.2), squeeze=False)
    for j, ((ex, _), orig) in enumerate(zip(chosen, originals)):
        axes[0, j].imshow(orig.squeeze(), vmin=0, vmax=1)
        axes[1, j].imshow(np.clip(ex.adversary, 0, 1).squeeze(), vmin=0, vmax=1)
        axes[1, j].set_title("fooled" if ex.success else "held", fontsize=7)
        axes[0, j].axis("off")
        axes[1, j].axis("off")
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sia-lab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", default=None, help="run directory (default runs/<command>-seed<N>)")
    parser.add_argument("--seed", type=int, default=None, help="override the config's top-level seed")
    parser.add_argument("--plots", action="store_true", help="also write PNG plots")
    parser.add_argument("--workers", type=int, default=1,
                        help="attack worker processes (SIA_LAB_WORKERS overrides)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, config_path, out=None, seed: int | None = None, plots: bool = False,
        workers: int = 1) -> int:
    """Programmatic equivalent of the CLI; returns the exit code."""
    try:
        path = _require(config_path, "config")
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
        cfg = parse_config(command, raw, seed)
        _check_inputs(cfg)
        out = Path(out) if out is not None else Path("runs") / f"{command}-seed{cfg.seed}"
        HANDLERS[command](cfg, out, plots, workers)
    except ConfigError as exc:
        print(f"sia-lab: config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_SCHEMA
    except MissingInput as exc:
        print(f"sia-lab: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"sia-lab: numeric failure at sample {exc.sample} (iteration {exc.iteration}): "
              f"{exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("wrote %s", out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.seed, args.plots, args.workers)


if __name__ == "__main__":
    sys.exit(main())
