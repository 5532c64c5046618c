"""Experiment orchestration: configs, evaluation, sweeps, Monte Carlo and reports."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .attack import VARIANTS, AttackConfig, InjectionResult, activation_census, inject
from .data import Dataset, TriggerSpec, load_idx, synth_split
from .defenses import (DefenseReport, defense_fine_prune, defense_fine_tune, defense_lipschitz_prune,
                       fine_prune_sweep, neural_cleanse)
from .metrics import AttackProbe, metric_asr, metric_accuracy, metric_ca_ba
from .nn import Model, build_model
from .trainer import TrainConfig, train

__all__ = ["metric_asr", "metric_ca_ba", "metric_accuracy", "monte_carlo_activation", "activation_bound",
           "ExperimentConfig", "EvalReport", "evaluate", "run_ablation", "CSV_COLUMNS"]

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ["run_id", "seed", "lambda", "gamma", "trigger_h", "trigger_w", "CA", "BA", "ASR",
               "clean_activations", "backdoored_activations", "surgery_ms", "defense", "defense_param",
               "ACC_after", "ASR_after"]


# ---------------------------------------------------------------------------
# Monte Carlo activation study


def activation_bound(lam: float, alpha: float, e: int) -> float:
    """Upper bound ``(2 lam)^e / (alpha^e e!)`` on the chance that a uniform
    input in [0, 1]^e fires a switch whose trigger weights all satisfy |w| >= alpha."""
    if e < 1:
        raise ValueError("e must be >= 1")
    if not (lam > 0 and alpha > 0):
        raise ValueError("lambda and alpha must be positive")
    log_p = e * math.log(2 * lam) - e * math.log(alpha) - math.lgamma(e + 1)
    return math.exp(log_p)


class MonteCarloResult(NamedTuple):
    frequency: float
    bound: float          # capped at 1
    activations: int
    samples: int
    sigma: float          # binomial standard error of the frequency at the bound


def monte_carlo_activation(trigger, lam: float, weights, e: Optional[int] = None, alpha: Optional[float] = None,
                           num_samples: int = 1_000_000, seed: int = 0, chunk: int = 250_000) -> MonteCarloResult:
    """Sample uniform inputs on [0, 1]^e and count how often
    ``sum |w (x - delta)| < lam``.

    ``trigger`` is a ``TriggerSpec`` (its pattern on the trigger pixels is
    delta) or the delta vector itself.  Only trigger coordinates matter, so
    only those are sampled.  ``alpha`` defaults to ``min |w|``.
    """
    delta = (trigger.pattern.reshape(-1)[trigger.gamma] if isinstance(trigger, TriggerSpec)
             else np.atleast_1d(np.asarray(trigger))).astype(np.float64)
    w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    if w.shape != delta.shape:
        raise ValueError(f"{w.size} weights for {delta.size} trigger coordinates")
    e = w.size if e is None else int(e)
    if e != w.size:
        raise ValueError(f"e={e} but {w.size} trigger weights given")
    alpha = float(np.abs(w).min()) if alpha is None else float(alpha)
    if np.any(np.abs(w) < alpha):
        raise ValueError(f"some |w| fall below alpha={alpha}")
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    bound = min(1.0, activation_bound(lam, alpha, e))
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < num_samples:
        n = min(chunk, num_samples - done)
        x = rng.random((n, e))
        hits += int(np.count_nonzero(np.abs((x - delta) * w).sum(axis=1) < lam))
        done += n
    freq = hits / num_samples
    return MonteCarloResult(freq, bound, hits, num_samples, math.sqrt(bound * (1 - bound) / num_samples))


# ---------------------------------------------------------------------------
# configuration


def _floats(s: str) -> list:
    return [float(v) for v in _items(s)]


def _items(s: str) -> list:
    return [v.strip() for v in s.split(",") if v.strip()]


def _size(s: str) -> tuple:
    h, _, w = s.lower().partition("x")
    return (int(h), int(w or h))


def _location(s: str):
    s = s.strip()
    if ":" in s:
        top, left = s.split(":")
        return (int(top), int(left))
    return s


def _gamma(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("auto", "") else float(s)


@dataclass
class ExperimentConfig:
    """One experiment.  Stored as INI; see ``EXAMPLE_CONFIG`` for every key."""

    data_source: str = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_per_class: int = 600
    test_per_class: int = 200
    architecture: str = "fcn"
    epochs: int = 5
    learning_rate: float = 0.05
    batch_size: int = 64
    attack: AttackConfig = field(default_factory=AttackConfig)
    defenses: list = field(default_factory=list)
    grid_lambda: list = field(default_factory=list)
    grid_gamma: list = field(default_factory=list)
    grid_trigger_size: list = field(default_factory=list)
    grid_trigger_location: list = field(default_factory=list)
    seed: int = 0
    output_dir: str = "runs"
    timing: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.data_source not in ("synthetic", "idx"):
            raise ValueError(f"data source must be 'synthetic' or 'idx', got {self.data_source!r}")
        if self.data_source == "idx" and not all([self.train_images, self.train_labels,
                                                  self.test_images, self.test_labels]):
            raise ValueError("idx data source needs train/test image and label paths")
        for point in self.points():
            _ = point[2]  # AttackConfig.__post_init__ validated it
        for d in self.defenses:
            parse_defense(d)

    # -- grid -------------------------------------------------------------

    def points(self) -> list:
        """``(axis, index, AttackConfig)`` for every sweep point; a lone default
        point when no grid is set."""
        base = self.attack
        out = []
        axes = [("lambda", self.grid_lambda, lambda v: replace(base, lam=v)),
                ("gamma", self.grid_gamma, lambda v: replace(base, gamma=v)),
                ("trigger_size", self.grid_trigger_size, lambda v: replace(base, trigger_size=tuple(v))),
                ("trigger_location", self.grid_trigger_location, lambda v: replace(base, trigger_location=v))]
        for axis, values, make in axes:
            out += [(axis, i, make(v)) for i, v in enumerate(values)]
        return out or [("default", 0, base)]

    # -- (de)serialisation ------------------------------------------------

    def to_ini(self) -> str:
        a = self.attack
        v = a.variant
        cp = configparser.ConfigParser()
        cp["data"] = {"source": self.data_source, "train_per_class": str(self.train_per_class),
                      "test_per_class": str(self.test_per_class)}
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if getattr(self, k):
                cp["data"][k] = getattr(self, k)
        cp["model"] = {"architecture": self.architecture, "epochs": str(self.epochs),
                       "learning_rate": repr(self.learning_rate), "batch_size": str(self.batch_size)}
        loc = a.trigger_location if isinstance(a.trigger_location, str) else "%d:%d" % tuple(a.trigger_location)
        cp["attack"] = {"lambda": repr(a.lam), "gamma": "auto" if a.gamma is None else repr(a.gamma),
                        "target": str(a.target), "trigger_size": "%dx%d" % a.trigger_size,
                        "trigger_location": loc, "variant": v.name}
        for k, val in asdict(v).items():
            if val is not None:
                cp["attack"][k] = repr(val)
        cp["defenses"] = {"list": ", ".join(self.defenses)}
        cp["ablation"] = {
            "lambda": ", ".join(repr(x) for x in self.grid_lambda),
            "gamma": ", ".join("auto" if x is None else repr(x) for x in self.grid_gamma),
            "trigger_size": ", ".join("%dx%d" % tuple(s) for s in self.grid_trigger_size),
            "trigger_location": ", ".join(x if isinstance(x, str) else "%d:%d" % tuple(x)
                                          for x in self.grid_trigger_location)}
        cp["run"] = {"seed": str(self.seed), "output_dir": self.output_dir, "timing": str(self.timing).lower(),
                     "workers": str(self.workers)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)

        def get(section, key, default=None):
            return cp.get(section, key, fallback=default) if cp.has_section(section) else default

        variant_name = get("attack", "variant", "standard")
        if variant_name not in VARIANTS:
            raise ValueError(f"unknown variant {variant_name!r}; choose from {sorted(VARIANTS)}")
        vcls = VARIANTS[variant_name]
        vkw = {}
        for k in getattr(vcls, "__dataclass_fields__", {}):
            raw = get("attack", k)
            if raw is not None:
                vkw[k] = float(raw)
        attack = AttackConfig(
            lam=float(get("attack", "lambda", "0.1")),
            gamma=_gamma(get("attack", "gamma", "auto")),
            target=int(get("attack", "target", "0")),
            trigger_size=_size(get("attack", "trigger_size", "4x4")),
            trigger_location=_location(get("attack", "trigger_location", "bottom-right")),
            seed=int(get("run", "seed", "0")),
            variant=vcls(**vkw),
        )
        return cls(
            data_source=get("data", "source", "synthetic"),
            train_images=get("data", "train_images"), train_labels=get("data", "train_labels"),
            test_images=get("data", "test_images"), test_labels=get("data", "test_labels"),
            train_per_class=int(get("data", "train_per_class", "600")),
            test_per_class=int(get("data", "test_per_class", "200")),
            architecture=get("model", "architecture", "fcn"),
            epochs=int(get("model", "epochs", "5")),
            learning_rate=float(get("model", "learning_rate", "0.05")),
            batch_size=int(get("model", "batch_size", "64")),
            attack=attack,
            defenses=_items(get("defenses", "list", "")),
            grid_lambda=_floats(get("ablation", "lambda", "")),
            grid_gamma=[_gamma(v) for v in _items(get("ablation", "gamma", ""))],
            grid_trigger_size=[_size(v) for v in _items(get("ablation", "trigger_size", ""))],
            grid_trigger_location=[_location(v) for v in _items(get("ablation", "trigger_location", ""))],
            seed=int(get("run", "seed", "0")),
            output_dir=get("run", "output_dir", "runs"),
            timing=get("run", "timing", "false").strip().lower() in ("1", "true", "yes", "on"),
            workers=int(get("run", "workers", "1")),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def config_hash(self) -> str:
        """SHA-256 of the canonical INI rendering (output location excluded)."""
        canon = replace(self, output_dir="", workers=1).to_ini()
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


EXAMPLE_CONFIG = """\
[data]
# synthetic | idx (idx needs train_images, train_labels, test_images, test_labels)
source = synthetic
train_per_class = 600
test_per_class = 200

[model]
# fcn | cnn | layer list, e.g. "flatten, dense:32, relu, dense:10"
architecture = fcn
epochs = 5
learning_rate = 0.05
batch_size = 64

[attack]
lambda = 0.1
# auto solves lambda * gamma^(L-1) = 100
gamma = auto
target = 0
trigger_size = 4x4
# corner name or top:left
trigger_location = bottom-right
# standard | fineprune | lipschitz | obfuscate
variant = standard

[defenses]
# name[:param] -- fine-tune:EPOCHS, fine-prune:FRACTION, fine-prune-sweep:BUDGET,
# lipschitz:U, neural-cleanse:STEPS
list = fine-tune:5, fine-prune:0.2, lipschitz:1

[ablation]
lambda = 0.01, 0.1, 1
gamma = auto
trigger_size = 2x2, 4x4, 8x8
trigger_location = bottom-right, top-left

[run]
seed = 0
output_dir = runs
# surgery_ms is wall-clock; leave timing off for byte-identical CSVs
timing = false
workers = 1
"""


# ---------------------------------------------------------------------------
# data and models


def load_data(cfg: ExperimentConfig):
    if cfg.data_source == "idx":
        return (load_idx(cfg.train_images, cfg.train_labels, name="train"),
                load_idx(cfg.test_images, cfg.test_labels, name="test"))
    return synth_split(train_per_class=cfg.train_per_class, test_per_class=cfg.test_per_class, seed=cfg.seed)


def train_clean(cfg: ExperimentConfig, train_ds: Dataset) -> Model:
    model = build_model(cfg.architecture, train_ds.image_shape, train_ds.num_classes, seed=cfg.seed)
    model, _ = train(model, train_ds, TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                                  learning_rate=cfg.learning_rate, seed=cfg.seed))
    return model


# ---------------------------------------------------------------------------
# evaluation


DEFENSE_DEFAULTS = {"fine-tune": 5.0, "fine-prune": 0.2, "fine-prune-sweep": 0.05, "lipschitz": 1.0,
                    "neural-cleanse": 300.0}


def parse_defense(spec: str):
    name, _, param = spec.strip().partition(":")
    if name not in DEFENSE_DEFAULTS:
        raise ValueError(f"unknown defense {name!r}; choose from {sorted(DEFENSE_DEFAULTS)}")
    return name, float(param) if param else DEFENSE_DEFAULTS[name]


def apply_defense(spec: str, model: Model, train_ds: Dataset, probe: AttackProbe, path=None,
                  seed: int = 0) -> DefenseReport:
    name, p = parse_defense(spec)
    if name == "fine-tune":
        return defense_fine_tune(model, train_ds, epochs=int(p), probe=probe, path=path, seed=seed)
    if name == "fine-prune":
        return defense_fine_prune(model, train_ds, p, probe=probe)
    if name == "fine-prune-sweep":
        rep = fine_prune_sweep(model, train_ds, probe, budget=p)
        rep.metrics["acc_after"] = probe.acc(rep.model)
        rep.metrics["asr_after"] = probe.asr(rep.model)
        return rep
    if name == "lipschitz":
        return defense_lipschitz_prune(model, p, probe=probe)
    rep = neural_cleanse(model, train_ds, steps=int(p), seed=seed)
    # detection leaves the model untouched
    rep.metrics["acc_after"] = probe.acc(model)
    rep.metrics["asr_after"] = probe.asr(model)
    return rep


@dataclass
class EvalReport:
    ca: float
    ba: float
    asr: float
    clean_activations: int
    backdoored_activations: int
    surgery_ms: float
    defenses: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defenses"] = [r.to_dict() if isinstance(r, DefenseReport) else r for r in self.defenses]
        return d


def evaluate(clean: Model, result: InjectionResult, test: Dataset, train_ds: Optional[Dataset] = None,
             defenses: Sequence[str] = (), target: Optional[int] = None, provenance: Optional[dict] = None) -> EvalReport:
    target = _target_of(result) if target is None else target
    ca, ba, _ = metric_ca_ba(clean, result.model, test)
    probe = AttackProbe(test, result.trigger, target)
    census = activation_census(result.model, result.path, test, result.trigger)
    reps = [apply_defense(d, result.model, train_ds, probe, result.path.neurons, seed=result.seed)
            for d in defenses]
    return EvalReport(ca, ba, probe.asr(result.model), census.clean, census.backdoored,
                      result.surgery_seconds * 1e3, reps, dict(provenance or {}))


def _target_of(result: InjectionResult) -> int:
    return int(json.loads(result.model.metadata.get("attack", "{}")).get("target", 0))


# ---------------------------------------------------------------------------
# sweeps and CSV


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _gamma_cell(g) -> str:
    if isinstance(g, (list, tuple)):
        return ";".join(_fmt(x) for x in g)
    return _fmt(g)


def _run_point(args):
    cfg, clean, train_ds, test, run_id, axis, attack = args
    result = inject(clean, attack)
    report = evaluate(clean, result, test, train_ds, cfg.defenses, target=attack.target,
                      provenance={"seed": cfg.seed, "config_hash": cfg.config_hash(), "run_id": run_id})
    th, tw = attack.trigger_size
    base = {"run_id": run_id, "seed": cfg.seed, "lambda": attack.lam, "gamma": _gamma_cell(result.gamma),
            "trigger_h": th, "trigger_w": tw, "CA": report.ca, "BA": report.ba, "ASR": report.asr,
            "clean_activations": report.clean_activations,
            "backdoored_activations": report.backdoored_activations,
            "surgery_ms": report.surgery_ms if cfg.timing else None}
    rows = [{**base, "defense": "none", "defense_param": None, "ACC_after": report.ba, "ASR_after": report.asr}]
    for spec, rep in zip(cfg.defenses, report.defenses):
        _, p = parse_defense(spec)
        rows.append({**base, "defense": rep.defense, "defense_param": p,
                     "ACC_after": rep.metrics.get("acc_after"), "ASR_after": rep.metrics.get("asr_after")})
    point = {"run_id": run_id, "axis": axis, "attack": attack.to_dict(), "report": report.to_dict(),
             "path": result.path.to_dict()}
    return rows, point


class AblationResult(NamedTuple):
    rows: list
    summary: dict


def run_ablation(cfg: ExperimentConfig, clean: Optional[Model] = None, data=None) -> AblationResult:
    """Sweep each grid axis with the others at their defaults.  Returns CSV rows
    (one per point and defense) and a summary carrying the config hash."""
    train_ds, test = load_data(cfg) if data is None else data
    clean = train_clean(cfg, train_ds) if clean is None else clean
    h = cfg.config_hash()
    jobs = [(cfg, clean, train_ds, test, f"{h[:10]}-{axis}-{i:02d}", axis, attack)
            for axis, i, attack in cfg.points()]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outs = list(pool.map(_run_point, jobs))
    else:
        outs = [_run_point(j) for j in jobs]
    rows = [r for rs, _ in outs for r in rs]
    summary = {"config_hash": h, "csv_schema": CSV_SCHEMA_VERSION, "seed": cfg.seed,
               "architecture": cfg.architecture, "points": [p for _, p in outs]}
    return AblationResult(rows, summary)


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_csv(rows: Sequence[dict], path) -> None:
    Path(path).write_text(rows_to_csv(rows))


def read_csv(path) -> list:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: columns {reader.fieldnames} do not match schema v{CSV_SCHEMA_VERSION}")
        return list(reader)


def write_run(result: AblationResult, out_dir) -> tuple:
    """Write ``<hash>.csv`` and ``<hash>.json`` into ``out_dir``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = result.summary["config_hash"][:16]
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    write_csv(result.rows, csv_path)
    json_path.write_text(json.dumps(result.summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return csv_path, json_path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def merge_reports(paths: Sequence) -> list:
    """Concatenate run CSVs in the order given (an ordered reduction)."""
    rows = []
    for p in paths:
        rows += read_csv(p)
    return rows


def summarize(rows: Sequence[dict]) -> str:
    """Plain-text table: one line per (run, defense)."""
    head = f"{'run_id':<34} {'lambda':>7} {'trig':>5} {'BA':>7} {'ASR':>7} {'defense':<18} {'ACC_after':>9} {'ASR_after':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        r = {c: _fmt(r.get(c)) for c in CSV_COLUMNS}
        trig = f"{r['trigger_h']}x{r['trigger_w']}"
        lines.append(f"{r['run_id']:<34} {r['lambda']:>7} {trig:>5} {r['BA']:>7} {r['ASR']:>7} "
                     f"{(r['defense'] + (':' + r['defense_param'] if r['defense_param'] else '')):<18} "
                     f"{r['ACC_after']:>9} {r['ASR_after']:>9}")
    return "\n".join(lines) + "\n"
