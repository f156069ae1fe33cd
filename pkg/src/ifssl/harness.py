"""Experiment configuration, single runs, noise-ratio sweeps and reports.

A run directory holds everything needed to rebuild its tables::

    config.ini            every setting, defaults materialized
    epochs.jsonl          one JSON object per training epoch
    filter_history.csv    one row per filtering iteration
    summary.json          RunSummary without wall-clock
    timing.json           wall-clock seconds (the only non-deterministic file)
    snapshot.bin          best student/teacher weights
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ifssl.dataio import (
    Dataset,
    NoiseSpec,
    inject_uniform_noise,
    load_csv,
    make_gaussian_clusters,
    make_rings,
    normalize,
    split,
)
from ifssl.errors import ConfigurationError, DivergenceError, FormatError
from ifssl.filtering import (
    complete_removal_variant,
    iterative_filter_loop,
    noise_metrics,
    write_history_csv,
)
from ifssl.losses import CONSISTENCY_KINDS, LossWeights
from ifssl.meanteacher import TeacherStudentPair, TrainConfig, evaluate
from ifssl.netcore import ACTIVATIONS, NetworkParams

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "IFSSL_OUTPUT_ROOT"

MODES = ("baseline", "ssl-only", "if", "if-ssl", "complete-removal")
TERMS = ("meanteacher", "entropy", "pushaway", "none")
GENERATORS = ("gaussian", "rings", "csv")
VALID_MODES = ("noisy", "clean")

# keys that describe the data and must agree before runs are aggregated
DATASET_KEYS = (
    "generator",
    "csv_path",
    "m",
    "n_per_class",
    "d",
    "separation",
    "noise_sigma",
    "radius_gap",
    "train_frac",
    "valid_frac",
    "valid_mode",
    "clean_valid_count",
)


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    generator: str = "gaussian"
    csv_path: str = ""
    m: int = 4
    n_per_class: int = 500
    d: int = 2
    separation: float = 6.0
    noise_sigma: float = 1.5
    radius_gap: float = 2.0
    noise_ratio: float = 0.4
    train_frac: float = 0.8
    valid_frac: float = 0.1
    valid_mode: str = "noisy"
    clean_valid_count: int = 50
    # method
    mode: str = "if-ssl"
    unsupervised: str = "auto"
    consistency: str = "mse"
    n_max_iterations: int = 10
    topk: int = 1
    mva_alpha: float = 0.6
    # training
    max_epochs: int = 100
    patience: int = 20
    base_lr: float = 0.05
    supervised_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 2e-4
    beta: float = 0.99
    ema_warmup: bool = True
    consistency_max: float = 10.0
    entropy_min_w: float = 1.0
    entropy_balance_w: float = 1.0
    push_away_c: float = 1.0
    ramp_epochs: int = 5
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    labeled_per_batch: int = 32
    unlabeled_per_batch: int = 96
    jitter: float = 0.1
    # bookkeeping
    seeds: tuple = (0,)
    output_dir: str = "runs"
    save_snapshot: bool = True

    @property
    def term(self) -> str:
        """Unsupervised term after resolving ``auto``."""
        if self.unsupervised != "auto":
            return self.unsupervised
        return "none" if self.mode in ("baseline", "if") else "meanteacher"

    def validate(self) -> ExperimentConfig:
        def bad(key, msg):
            raise ConfigurationError(msg, key)

        if self.generator not in GENERATORS:
            bad("generator", f"must be one of {GENERATORS}")
        if self.generator == "csv" and not self.csv_path:
            bad("csv_path", "generator=csv needs a dataset path")
        if self.generator == "csv" and not Path(self.csv_path).exists():
            bad("csv_path", f"dataset file {self.csv_path!r} not found")
        if self.mode not in MODES:
            bad("mode", f"must be one of {MODES}")
        if self.unsupervised not in TERMS + ("auto",):
            bad("unsupervised", f"must be one of {TERMS + ('auto',)}")
        if self.consistency not in CONSISTENCY_KINDS:
            bad("consistency", f"must be one of {CONSISTENCY_KINDS}")
        if self.valid_mode not in VALID_MODES:
            bad("valid_mode", f"must be one of {VALID_MODES}")
        if self.activation not in ACTIVATIONS:
            bad("activation", f"must be one of {ACTIVATIONS}")
        term = self.term
        if self.mode == "baseline" and term != "none":
            bad("unsupervised", f"mode=baseline trains without an unsupervised term, got {term!r}")
        if self.mode in ("ssl-only", "if-ssl", "complete-removal") and term == "none":
            bad("unsupervised", f"mode={self.mode} needs an unsupervised term")
        if term == "pushaway" and self.mode not in ("if",):
            bad("unsupervised", "pushaway needs filtered labels to push away from; use mode=if")
        if not 0.0 <= self.noise_ratio <= 1.0:
            bad("noise_ratio", "must lie in [0, 1]")
        if self.m < 2:
            bad("m", "need at least 2 classes")
        if self.topk > self.m:
            bad("topk", "exceeds class count")
        if self.n_max_iterations < 0:
            bad("n_max_iterations", "must be >= 0")
        if not self.seeds:
            bad("seeds", "need at least one seed")
        if self.supervised_lr <= 0:
            bad("supervised_lr", "must be > 0")
        self.loss_weights()
        self.train_config(0)
        return self

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            self.consistency_max, self.entropy_min_w, self.entropy_balance_w, self.push_away_c, self.ramp_epochs
        )

    def train_config(self, seed: int) -> TrainConfig:
        term = self.term
        return TrainConfig(
            max_epochs=self.max_epochs,
            patience=self.patience,
            base_lr=self.supervised_lr if term == "none" else self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            beta=self.beta,
            weights=self.loss_weights(),
            unsupervised=term,
            consistency=self.consistency,
            topk=self.topk,
            mva_alpha=self.mva_alpha,
            hidden=tuple(self.hidden),
            activation=self.activation,
            labeled_per_batch=self.labeled_per_batch,
            unlabeled_per_batch=self.unlabeled_per_batch,
            jitter=self.jitter,
            ema_warmup=self.ema_warmup,
            seed=seed,
        )

    def dataset_signature(self) -> dict:
        return {k: _format_value(getattr(self, k)) for k in DATASET_KEYS}


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, raw):
    kind = FIELD_TYPES[key]
    text = str(raw).strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(int(t) for t in items)
        return text
    except ValueError:
        raise ConfigurationError(f"cannot parse {text!r} as {kind}", key) from None


def _normalize_key(key):
    return key.strip().replace("-", "_")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``[section]`` headers only group keys."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"unreadable config file {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            values[_normalize_key(key)] = value
    return values


def parse_config(path=None, overrides=None) -> ExperimentConfig:
    """Build a validated config from an optional file plus overrides (flags win)."""
    raw = {}
    if path is not None:
        raw.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[_normalize_key(k)] = v
    values = {}
    for key, value in raw.items():
        if key not in FIELD_TYPES:
            raise ConfigurationError("unknown configuration key", key)
        values[key] = value if not isinstance(value, str) else _parse_value(key, value)
        if FIELD_TYPES[key] == "tuple" and not isinstance(values[key], tuple):
            values[key] = tuple(values[key])
    return ExperimentConfig(**values).validate()


def config_text(config: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def write_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config_text(config))


def output_root(default="runs") -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, default)


# ---------------------------------------------------------------- snapshots

SNAPSHOT_MAGIC = b"IFSSLSNP"


def save_snapshot(pair: TeacherStudentPair, path) -> None:
    """Flat binary: magic, JSON header length, JSON header, float64 LE tensors."""
    header = {
        "activation": pair.student.activation,
        "beta": pair.beta,
        "shapes": [list(t.shape) for t in pair.student.tensors()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for net in (pair.student, pair.teacher):
            for t in net.tensors():
                fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_snapshot(path) -> TeacherStudentPair:
    data = Path(path).read_bytes()
    if not data.startswith(SNAPSHOT_MAGIC):
        raise FormatError("not a snapshot file", 1)
    (n,) = struct.unpack_from("<Q", data, len(SNAPSHOT_MAGIC))
    start = len(SNAPSHOT_MAGIC) + 8
    header = json.loads(data[start : start + n])
    offset = start + n
    nets = []
    for _ in range(2):
        tensors = []
        for shape in header["shapes"]:
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            tensors.append(arr.astype(np.float64))
            offset += 8 * count
        nets.append(NetworkParams.from_tensors(tensors, header["activation"]))
    if offset != len(data):
        raise FormatError("trailing bytes in snapshot", 1)
    return TeacherStudentPair(nets[0], nets[1], header["beta"])


# ---------------------------------------------------------------- data


@dataclass
class Splits:
    original: Dataset
    train: Dataset
    valid: Dataset
    test: Dataset


def _child_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def build_data(config: ExperimentConfig, seed: int) -> Splits:
    """Generate or load, split, inject noise into train (and noisy valid), normalize.

    All randomness derives from ``seed``; the test split is never noised.
    """
    s_data, s_split, s_noise_tr, s_noise_va, _ = np.random.SeedSequence(seed).spawn(5)
    if config.generator == "gaussian":
        ds = make_gaussian_clusters(
            config.m, config.n_per_class, config.d, config.separation, config.noise_sigma, s_data
        )
    elif config.generator == "rings":
        ds = make_rings(config.m, config.n_per_class, config.radius_gap, config.noise_sigma, s_data)
    else:
        ds = load_csv(config.csv_path)
    clean_count = config.clean_valid_count if config.valid_mode == "clean" else None
    train, valid, test = split(ds, config.train_frac, config.valid_frac, s_split, clean_count)
    train = inject_uniform_noise(train, NoiseSpec(config.noise_ratio, _child_int(s_noise_tr)))
    if config.valid_mode == "noisy":
        valid = inject_uniform_noise(valid, NoiseSpec(config.noise_ratio, _child_int(s_noise_va)))
    train, stats = normalize(train)
    valid, _ = normalize(valid, stats)
    test, _ = normalize(test, stats)
    return Splits(ds, train, valid, test)


def train_seed(seed: int) -> int:
    return _child_int(np.random.SeedSequence(seed).spawn(5)[4])


# ---------------------------------------------------------------- runs


@dataclass
class RunSummary:
    mode: str
    unsupervised: str
    noise_ratio: float
    seed: int
    test_acc: float | None
    best_valid_acc: float | None
    iterations: int
    best_iteration: int
    retained_count: int | None = None
    noise_ratio_retained: float | None = None
    clean_label_recall: float | None = None
    noisy_label_removal_recall: float | None = None
    diverged: bool = False
    error: str = ""
    history_file: str = "filter_history.csv"
    wall_clock: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunSummary:
        return cls(**json.loads(text))


def _run_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.output_dir) / f"seed_{seed}"


def run_experiment(config: ExperimentConfig, seed: int | None = None, out_dir=None) -> RunSummary:
    """Run one seed of ``config`` end to end and write its run directory.

    Divergence does not raise: the summary is flagged ``diverged`` and the
    epoch records completed so far are still written.
    """
    config.validate()
    seed = config.seeds[0] if seed is None else seed
    out = Path(out_dir) if out_dir is not None else _run_dir(config, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_config(dataclasses.replace(config, seeds=(seed,), output_dir="."), out / "config.ini")
    started = time.perf_counter()

    data = build_data(config, seed)
    tc = config.train_config(train_seed(seed))
    n_max = config.n_max_iterations if config.mode in ("if", "if-ssl", "complete-removal") else 0
    loop = complete_removal_variant if config.mode == "complete-removal" else iterative_filter_loop
    summary = RunSummary(config.mode, config.term, config.noise_ratio, seed, None, None, 0, -1)
    records_by_iter = []
    try:
        best, state = loop(data.train, data.valid, tc, n_max)
    except DivergenceError as exc:
        log.warning("seed %s diverged: %s", seed, exc)
        summary.diverged = True
        summary.error = str(exc)
        records_by_iter = [exc.records]
        write_history_csv([], out / "filter_history.csv")
    else:
        records_by_iter = state.epoch_records
        summary.test_acc = evaluate(best.teacher, data.test, "true")
        summary.best_valid_acc = state.best_valid_acc
        summary.iterations = len(state.history)
        summary.best_iteration = state.best_iteration
        final = state.filtered_metrics() if n_max > 0 else noise_metrics(data.train, data.train)
        summary.retained_count = final.retained_count
        summary.noise_ratio_retained = final.noise_ratio_retained
        summary.clean_label_recall = final.clean_label_recall
        summary.noisy_label_removal_recall = final.noisy_label_removal_recall
        write_history_csv(state.history, out / "filter_history.csv")
        if config.save_snapshot:
            save_snapshot(best, out / "snapshot.bin")

    with open(out / "epochs.jsonl", "w") as fh:
        for it, recs in enumerate(records_by_iter):
            for r in recs:
                fh.write(json.dumps({"iteration": it, **r.to_dict()}, sort_keys=True) + "\n")
    summary.wall_clock = time.perf_counter() - started
    (out / "summary.json").write_text(summary.to_json())
    (out / "timing.json").write_text(json.dumps({"wall_clock": summary.wall_clock}) + "\n")
    return summary


def _fmt_cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return repr(float(v)) if isinstance(v, float) else str(v)


def _ratio_tag(r: float) -> str:
    return f"noise_{r:g}"


def _sweep_cell(args):
    config, seed, out = args
    try:
        s = run_experiment(config, seed, out)
        return s.test_acc, s.diverged, ""
    except Exception as exc:  # a failed cell must not stop the sweep
        log.error("cell %s failed: %s", out, exc)
        return None, False, f"{type(exc).__name__}: {exc}"


def sweep(config: ExperimentConfig, noise_ratios, seeds=None, modes=None, out_dir=None, jobs: int = 1):
    """Run the ``mode x noise_ratio x seed`` grid and write the accuracy tables.

    Writes ``accuracy_vs_noise.csv`` (one row per cell) and
    ``accuracy_vs_noise_summary.csv`` (mean/stddev per mode and ratio).
    Returns the per-cell rows as dicts.
    """
    ratios = [float(r) for r in noise_ratios]
    seeds = list(config.seeds if seeds is None else seeds)
    modes = list(modes or [config.mode])
    if not ratios or not seeds:
        raise ConfigurationError("sweep needs at least one noise ratio and one seed")
    root = Path(out_dir or config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    cells, jobs_args = [], []
    for mode in modes:
        mcfg = dataclasses.replace(config, mode=mode, unsupervised="auto" if mode != config.mode else config.unsupervised)
        for r in ratios:
            rcfg = dataclasses.replace(mcfg, noise_ratio=r).validate()
            for s in seeds:
                out = root / mode / _ratio_tag(r) / f"seed_{s}"
                cells.append((mode, r, s))
                jobs_args.append((rcfg, s, out))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, jobs_args))
    else:
        results = [_sweep_cell(a) for a in jobs_args]

    rows = [
        {"mode": m, "noise_ratio": r, "seed": s, "test_acc": acc, "diverged": div, "error": err}
        for (m, r, s), (acc, div, err) in zip(cells, results)
    ]
    with open(root / "accuracy_vs_noise.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "noise_ratio", "seed", "test_acc"])
        for row in rows:
            w.writerow([row["mode"], _fmt_cell(row["noise_ratio"]), row["seed"], _fmt_cell(row["test_acc"])])
    summary_rows = aggregate((row["mode"], row["noise_ratio"], row["test_acc"]) for row in rows)
    _write_aggregate(summary_rows, root / "accuracy_vs_noise_summary.csv")
    write_config(config, root / "config.ini")
    return rows


def aggregate(triples):
    """``(label, noise_ratio, value)`` triples -> sorted rows with n/mean/std (population std)."""
    groups: dict[tuple, list] = {}
    for label, ratio, value in triples:
        groups.setdefault((label, float(ratio)), []).append(value)
    out = []
    for (label, ratio), vals in groups.items():
        ok = [v for v in vals if v is not None]
        mean = float(np.mean(ok)) if ok else None
        std = float(np.std(ok)) if ok else None
        out.append({"mode": label, "noise_ratio": ratio, "n": len(ok), "failed": len(vals) - len(ok), "mean": mean, "std": std})
    return out


def _write_aggregate(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "noise_ratio", "n", "failed", "mean_test_acc", "std_test_acc"])
        for row in rows:
            w.writerow(
                [row["mode"], _fmt_cell(row["noise_ratio"]), row["n"], row["failed"], _fmt_cell(row["mean"]), _fmt_cell(row["std"])]
            )


def _find_runs(paths):
    found = []
    for p in paths:
        p = Path(p)
        if (p / "summary.json").exists():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(q.parent for q in p.rglob("summary.json")))
    return found


def report(run_dirs, out_csv=None) -> str:
    """Aggregate finished runs into a mode x noise-ratio table of mean (std) test accuracy.

    Returns the text table; also writes the long-format CSV when ``out_csv``
    is given. Refuses runs generated from different dataset settings.
    """
    runs = _find_runs(run_dirs)
    if not runs:
        raise ConfigurationError("no completed runs found")
    signature = None
    triples = []
    for run in runs:
        cfg = parse_config(run / "config.ini")
        sig = cfg.dataset_signature()
        if signature is None:
            signature = sig
        elif sig != signature:
            diff = sorted(k for k in sig if sig[k] != signature[k])
            raise ConfigurationError(f"runs use different dataset settings ({', '.join(diff)}); refusing to aggregate")
        s = RunSummary.from_json((run / "summary.json").read_text())
        label = s.mode if s.unsupervised == cfg.term and cfg.unsupervised == "auto" else f"{s.mode}+{s.unsupervised}"
        triples.append((label, s.noise_ratio, s.test_acc))
    rows = sorted(aggregate(triples), key=lambda r: (r["mode"], r["noise_ratio"]))
    if out_csv is not None:
        _write_aggregate(rows, out_csv)
    return format_table(rows)


def format_table(rows) -> str:
    ratios = sorted({r["noise_ratio"] for r in rows})
    labels = sorted({r["mode"] for r in rows})
    cell = {(r["mode"], r["noise_ratio"]): r for r in rows}
    head = ["mode"] + [f"{100 * r:g}%" for r in ratios]
    lines = []
    for label in labels:
        line = [label]
        for r in ratios:
            c = cell.get((label, r))
            if c is None or c["mean"] is None:
                line.append("-")
            elif c["n"] > 1:
                line.append(f"{100 * c['mean']:.2f} ({100 * c['std']:.2f})")
            else:
                line.append(f"{100 * c['mean']:.2f}")
        lines.append(line)
    widths = [max(len(row[k]) for row in [head, *lines]) for k in range(len(head))]
    buf = io.StringIO()
    for row in [head, *lines]:
        buf.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")
    return buf.getvalue()
