"""Experiment orchestration: configs, attack runs, CSV outputs and defense comparisons.

Output files written by :func:`run_experiment` (column order is fixed):

``traces.csv``   image_id,round,l2,linf,pred,success
``curves.csv``   round,acc,asr
``finals.csv``   image_id,label,target,succeeded,rounds_used,l2,linf,ssim
``summary.csv``  metric,value
``config.echo``  the canonical ``key = value`` form of the config

Floats are written with ``repr`` so re-runs are byte-identical.  Wall time is
kept out of the CSVs and goes to ``timing.txt``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackBudget, AttackTrace, parse_attack, run_attack
from .core import Dataset, gen_shapes_dataset, load_dataset, prng_new
from .metrics import curves_from_traces, evaluate_clean_accuracy, l2_norm, ssim
from .model import REFERENCE_ARCH, TinyModel, load_model, model_init, reference_model, train, zoom_out
from .preprocess import parse_pipeline

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "RunReport",
    "REFERENCE_TRAINING",
    "train_reference",
    "load_config",
    "run_experiment",
    "compare_defenses",
    "verify_summary",
    "STANDARD_ATTACKS",
]

# Recipe that produced data/reference.tmdl.  ``train_reference()`` rebuilds it.
REFERENCE_TRAINING = {
    "seed": 7,
    "train_size": 1000,
    "class_count": 4,
    "side": 32,
    "arch": REFERENCE_ARCH,
    "epochs": 30,
    "lr": 0.01,
    "momentum": 0.9,
    "batch_size": 32,
    "label_smoothing": 0.1,
    "zoom_min_scale": 0.7,
    "zoom_prob": 0.5,
}

STANDARD_ATTACKS = ("fgsm", "ifgsm", "lbfgs", "cw")


class ConfigError(ValueError):
    """Bad config file, key or value."""


def train_reference(recipe: dict = REFERENCE_TRAINING, log=None) -> TinyModel:
    seed = recipe["seed"]
    data = gen_shapes_dataset(recipe["train_size"], recipe["class_count"], recipe["side"],
                              prng_new(seed, "train"))
    model = model_init(recipe["arch"], prng_new(seed, "init"),
                       (recipe["side"], recipe["side"], 3), recipe["class_count"])

    def augment(x, rng):
        return zoom_out(x, rng, recipe["zoom_min_scale"], recipe["zoom_prob"])

    return train(model, data, recipe["epochs"], recipe["lr"], prng_new(seed, "sgd"),
                 batch_size=recipe["batch_size"], momentum=recipe["momentum"], augment=augment,
                 label_smoothing=recipe["label_smoothing"], log=log)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run.

    ``dataset`` is ``"shapes"`` (generate ``dataset_size`` held-out images from
    ``seed``) or a directory written by ``gen-data``.  ``model`` is
    ``"reference"`` (shipped weights), ``"train"`` (the reference recipe) or a
    path to a ``.tmdl`` file.
    """

    seed: int = 0
    dataset: str = "shapes"
    dataset_size: int = 200
    class_count: int = 4
    side: int = 32
    model: str = "reference"
    defense: str = "identity"
    attack: str = "bpda(lr=0.1)"
    max_rounds: int = 100
    l2_bound: float = 0.05
    linf_bound: float = 8 / 255
    eot_ensemble: int = 30
    bound_mode: str = "stop"
    n_images: int = 50
    output_dir: str = "results"
    threads: int = 1

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.n_images < 1:
            raise ConfigError("n_images must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be at least 1")
        try:
            self.budget
            parse_pipeline(self.defense)
            if self.attack != "none":
                parse_attack(self.attack)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(self.max_rounds, self.l2_bound, self.linf_bound, 0.1,
                            self.eot_ensemble, self.bound_mode)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" if isinstance(getattr(self, f.name), float)
                 else f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kind = kinds[name]
            try:
                if kind == "int":
                    kw[name] = int(raw)
                elif kind == "float":
                    kw[name] = float(raw)
                else:
                    kw[name] = str(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r} for {key}") from exc
        return cls(**kw)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    values = {}
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {num}: expected 'key = value', got {line!r}")
        values[key.strip()] = val.strip()
    return values


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_config_text(text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_mapping(values)


# --------------------------------------------------------------------------- running


@dataclass
class RunReport:
    config: ExperimentConfig
    traces: list
    curves: np.ndarray
    summary: dict
    ssims: list = field(default_factory=list)
    wall_time: float = 0.0


def _load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "shapes":
        return gen_shapes_dataset(cfg.dataset_size, cfg.class_count, cfg.side, prng_new(cfg.seed, "eval-data"))
    return load_dataset(cfg.dataset)


def _load_model(cfg: ExperimentConfig) -> TinyModel:
    if cfg.model == "reference":
        return reference_model()
    if cfg.model == "train":
        recipe = dict(REFERENCE_TRAINING, seed=cfg.seed)
        return train_reference(recipe)
    return load_model(cfg.model)


def select_images(model, data: Dataset, n: int, seed: int):
    """First ``n`` correctly classified images and a random wrong-label target for each."""
    correct = np.nonzero(model.predict(data.images) == data.labels)[0]
    if len(correct) < n:
        raise ValueError(f"only {len(correct)} correctly classified images, need {n}")
    idx = correct[:n]
    k = data.class_count
    shift = prng_new(seed, "targets").integers(1, k, n)
    targets = (data.labels[idx] + shift) % k
    return idx, targets


def _max_round(cfg: ExperimentConfig) -> int:
    kind = parse_attack(cfg.attack).kind
    return 1 if kind in STANDARD_ATTACKS else cfg.max_rounds


def run_experiment(cfg: ExperimentConfig, model: TinyModel | None = None,
                   data: Dataset | None = None, write: bool = True) -> RunReport:
    start = time.perf_counter()
    model = model if model is not None else _load_model(cfg)
    data = data if data is not None else _load_data(cfg)
    defense = parse_pipeline(cfg.defense)
    spec = parse_attack(cfg.attack)
    idx, targets = select_images(model, data, cfg.n_images, cfg.seed)
    root = prng_new(cfg.seed, "attack")
    budget = cfg.budget

    def one(j: int) -> AttackTrace:
        i = int(idx[j])
        return run_attack(spec, model, defense, data.images[i], int(data.labels[i]), int(targets[j]),
                          budget, root.child(f"img{j}"))

    if cfg.threads == 1:
        traces = [one(j) for j in range(len(idx))]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            traces = list(pool.map(one, range(len(idx))))
    ssims = [ssim(tr.final_image, data.images[int(i)]) for tr, i in zip(traces, idx)]
    curves = curves_from_traces(traces, _max_round(cfg))
    summary = summarize(traces, ssims, curves)
    report = RunReport(cfg, traces, curves, summary, ssims, time.perf_counter() - start)
    if write:
        write_report(report, idx)
    return report


def summarize(traces, ssims, curves) -> dict:
    won = [k for k, tr in enumerate(traces) if tr.succeeded]

    def mean_over(values):
        return float(np.mean(values)) if values else float("nan")

    return {
        "n_images": len(traces),
        "clean_acc": float(curves[0, 1]),
        "final_acc": float(curves[-1, 1]),
        "final_asr": float(curves[-1, 2]),
        "mean_rounds": float(np.mean([tr.rounds_used for tr in traces])),
        "success_l2": mean_over([traces[k].final.l2 for k in won]),
        "success_linf": mean_over([traces[k].final.linf for k in won]),
        "success_ssim": mean_over([ssims[k] for k in won]),
    }


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(header)
    for row in rows:
        out.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_report(report: RunReport, idx) -> None:
    out = Path(report.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_rows = [(int(i), rec.round, rec.l2, rec.linf, rec.pred, rec.success)
                  for i, tr in zip(idx, report.traces) for rec in tr.rounds]
    final_rows = [(int(i), tr.label, tr.target, tr.succeeded, tr.rounds_used, tr.final.l2, tr.final.linf, s)
                  for i, tr, s in zip(idx, report.traces, report.ssims)]
    curve_rows = [(int(r), a, s) for r, a, s in report.curves]
    files = {
        "traces.csv": _csv_text(["image_id", "round", "l2", "linf", "pred", "success"], trace_rows),
        "curves.csv": _csv_text(["round", "acc", "asr"], curve_rows),
        "finals.csv": _csv_text(["image_id", "label", "target", "succeeded", "rounds_used", "l2", "linf", "ssim"],
                                final_rows),
        "summary.csv": _csv_text(["metric", "value"], report.summary.items()),
        "config.echo": report.config.echo(),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    (out / "timing.txt").write_text(f"wall_time_s = {report.wall_time:.3f}\n")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def verify_summary(output_dir, tol: float = 1e-12) -> list:
    """Recompute ``summary.csv`` and ``curves.csv`` from traces and finals.

    Returns a list of mismatch descriptions (empty when everything agrees).
    """
    out = Path(output_dir)
    traces = _read_csv(out / "traces.csv")
    finals = _read_csv(out / "finals.csv")
    stored = {row["metric"]: float(row["value"]) for row in _read_csv(out / "summary.csv")}
    curves = _read_csv(out / "curves.csv")
    labels = {row["image_id"]: int(row["label"]) for row in finals}
    by_image = {}
    for row in traces:
        by_image.setdefault(row["image_id"], []).append(row)
    max_round = int(curves[-1]["round"])
    n = len(finals)
    acc = np.zeros(max_round + 1)
    asr = np.zeros(max_round + 1)
    for image_id, rows in by_image.items():
        recs = {int(r["round"]): r for r in rows}
        last, won = None, False
        for r in range(max_round + 1):
            if r in recs:
                last = recs[r]
                won = won or last["success"] == "1"
            acc[r] += last is not None and int(last["pred"]) == labels[image_id]
            asr[r] += won
    acc /= n
    asr /= n
    problems = []
    for r, row in enumerate(curves):
        if abs(float(row["acc"]) - acc[r]) > tol or abs(float(row["asr"]) - asr[r]) > tol:
            problems.append(f"curves.csv round {r} disagrees with traces")
    won = [row for row in finals if row["succeeded"] == "1"]

    def mean_of(key):
        return float(np.mean([float(row[key]) for row in won])) if won else float("nan")

    expected = {
        "n_images": n,
        "clean_acc": acc[0],
        "final_acc": acc[-1],
        "final_asr": asr[-1],
        "mean_rounds": float(np.mean([int(row["rounds_used"]) for row in finals])),
        "success_l2": mean_of("l2"),
        "success_linf": mean_of("linf"),
        "success_ssim": mean_of("ssim"),
    }
    for key, value in expected.items():
        have = stored.get(key)
        if have is None:
            problems.append(f"summary.csv lacks {key}")
        elif not (np.isnan(value) and np.isnan(have)) and abs(have - value) > tol:
            problems.append(f"summary {key}: stored {have!r}, recomputed {value!r}")
    # finals must agree with the last traced round of each image
    for row in finals:
        last = max(by_image[row["image_id"]], key=lambda r: int(r["round"]))
        if last["l2"] != row["l2"] or last["linf"] != row["linf"]:
            problems.append(f"finals.csv image {row['image_id']} disagrees with its last trace row")
    return problems


# --------------------------------------------------------------------------- comparisons

_SHARED = ("seed", "dataset", "dataset_size", "class_count", "side", "model", "attack")


def transform_stats(model, defense, data: Dataset, seed: int):
    """Mean l2 and SSIM between clean images and one draw of ``g(x)`` each."""
    rng = prng_new(seed, "transform")
    l2s, ssims = [], []
    for i, img in enumerate(data.images):
        out = defense.apply(img, rng.child(f"img{i}"))
        l2s.append(l2_norm(img, out))
        ssims.append(ssim(img, out))
    return float(np.mean(l2s)), float(np.mean(ssims))


def compare_defenses(configs, model: TinyModel | None = None, data: Dataset | None = None,
                     corpus_size: int = 100) -> list:
    """One row per config: transform l2/SSIM, clean ACC, and final ACC/ASR under the attack.

    Configs must agree on dataset, model, seed and attack.  ``attack = none``
    skips the attack columns (they are left blank).  Transform statistics and
    clean accuracy use the first ``corpus_size`` dataset images.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("no configs to compare")
    first = configs[0]
    for cfg in configs[1:]:
        for key in _SHARED:
            if getattr(cfg, key) != getattr(first, key):
                raise ConfigError(f"configs disagree on shared field {key!r}")
    model = model if model is not None else _load_model(first)
    data = data if data is not None else _load_data(first)
    corpus = data.subset(np.arange(min(corpus_size, len(data))))
    rows = []
    for cfg in configs:
        defense = parse_pipeline(cfg.defense)
        t_l2, t_ssim = transform_stats(model, defense, corpus, cfg.seed)
        acc = evaluate_clean_accuracy(model, defense, corpus, 1, prng_new(cfg.seed, "clean-acc"))
        row = {"defense": cfg.defense, "transform_l2": t_l2, "transform_ssim": t_ssim,
               "clean_acc": acc, "attack_acc": "", "attack_asr": ""}
        if cfg.attack != "none":
            report = run_experiment(cfg, model=model, data=data)
            row["attack_acc"] = report.summary["final_acc"]
            row["attack_asr"] = report.summary["final_asr"]
        rows.append(row)
    return rows


COMPARISON_HEADER = ["defense", "transform_l2", "transform_ssim", "clean_acc", "attack_acc", "attack_asr"]


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(COMPARISON_HEADER)
    for row in rows:
        out.writerow([_fmt(row[k]) for k in COMPARISON_HEADER])
    return buf.getvalue()
