"""Sequential drift-compensation runs over a task stream.

For every task: train the expanded classifier on current-task features,
compensate the stored Gaussian bank through the configured operator (from
the second task on), add the new classes' Gaussians, refine the classifier
on synthetic samples, and evaluate on the cumulative test set.

Methods: `seqft_baseline` (no compensation), `alpha1` (closed-form linear
operator), `alpha2` (weak-nonlinear operator with Monte Carlo
compensation), `mlpdc` (pure-MLP baseline), `oracle` (exact simulator
drift, simulated streams only).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import classifier as clf_mod
from .classifier import LinearClassifier, RefineConfig
from .errors import ConfigError
from .features import FeatureMatrix, l2_normalize
from .gaussians import GaussianBank, estimate_gaussian, linear_pushforward
from .linear_op import fit_ridge, fit_with_ade, reweight_identity
from .simulate import SimConfig, Stream, gen_stream, load_stream, oracle_compensate
from .weaknl import (
    OperatorTrainConfig,
    init_weaknl,
    mc_compensate,
    train_mlpdc,
    train_weaknl,
)

METHODS = ("seqft_baseline", "alpha1", "alpha2", "mlpdc", "oracle")
REPORT_SCHEMA = "report_v1"

_GOLDEN = 0x9E3779B9
_SEED_MASK = 0x7FFFFFFFFFFFFFFF


def mix_seed(base: int, task_id: int, class_id: int = 0) -> int:
    """Fixed seed mixing so adding classes never perturbs other draws."""
    return (base ^ (task_id * _GOLDEN) ^ class_id) & _SEED_MASK


@dataclass(frozen=True)
class RunConfig:
    method: str = "alpha1"
    ade: int = 0                      # auxiliary pairs used, 0 = off
    gamma_a1: float = 1e-4
    alpha_temp: float = 1.0
    gamma_a2: float = 0.5
    mc_multiplier: int = 10           # Monte Carlo samples per class = mult * d
    hidden: int | None = None         # psi hidden width, None = d
    operator_train: OperatorTrainConfig = field(default_factory=OperatorTrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    ce: RefineConfig = field(default_factory=lambda: RefineConfig(steps=1000))
    sim: SimConfig | None = None
    manifest: str | None = None
    out: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.ade < 0:
            raise ConfigError("ade pool size must be >= 0")
        if self.gamma_a1 <= 0 or self.alpha_temp <= 0 or self.gamma_a2 < 0:
            raise ConfigError("gamma_a1, alpha_temp must be > 0 and gamma_a2 >= 0")
        if self.mc_multiplier < 2:
            raise ConfigError("mc_multiplier must be >= 2 for identifiability")
        if (self.sim is None) == (self.manifest is None):
            raise ConfigError("exactly one of sim/manifest must be set")

    def resolved(self) -> dict:
        blob = asdict(self)
        blob["hidden"] = self.hidden
        return blob


@dataclass
class RunReport:
    method: str
    per_task: list            # dicts: task_id, accuracy, diagnostics
    last_acc: float
    inc_acc: float
    config: dict
    counters: dict
    timings: dict = field(default_factory=dict)  # text report only

    def to_json(self) -> str:
        # Timings are excluded: reports must be byte-identical across
        # repeated runs of the same config and seed.
        blob = {
            "schema": REPORT_SCHEMA,
            "method": self.method,
            "per_task": self.per_task,
            "last_acc": self.last_acc,
            "inc_acc": self.inc_acc,
            "config": self.config,
            "counters": self.counters,
        }
        return json.dumps(blob, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"method: {self.method}"]
        for entry in self.per_task:
            diag = ", ".join(f"{k}={v:.6g}" for k, v in
                             sorted(entry["diagnostics"].items()))
            lines.append(f"  task {entry['task_id']:>3}: "
                         f"acc={entry['accuracy']:.4f}"
                         + (f"  [{diag}]" if diag else ""))
        lines.append(f"last_acc: {self.last_acc:.4f}")
        lines.append(f"inc_acc:  {self.inc_acc:.4f}")
        lines.append("counters: " + json.dumps(self.counters, sort_keys=True))
        if self.timings:
            lines.append("timings (s): " + ", ".join(
                f"{k}={v:.2f}" for k, v in sorted(self.timings.items())))
        return "\n".join(lines) + "\n"


def _stream_for(cfg: RunConfig) -> Stream:
    if cfg.sim is not None:
        return gen_stream(cfg.sim)
    return load_stream(cfg.manifest)


def _aux_pair(rec, cfg: RunConfig):
    """First `ade` auxiliary pairs, or None when disabled/absent."""
    if cfg.ade == 0 or rec.aux_prev.n == 0:
        return None
    take = min(cfg.ade, rec.aux_prev.n)
    prev = l2_normalize(rec.aux_prev)
    curr = l2_normalize(rec.aux_curr)
    return (
        FeatureMatrix(prev.values[:take], prev.labels[:take],
                      prev.task_id, prev.model_tag),
        FeatureMatrix(curr.values[:take], curr.labels[:take],
                      curr.task_id, curr.model_tag),
    )


def _concat_pairs(x_prev, x_curr, aux):
    if aux is None:
        return x_prev, x_curr
    ap, ac = aux
    prev = FeatureMatrix(np.vstack([x_prev.values, ap.values]),
                         np.concatenate([x_prev.labels, ap.labels]),
                         x_prev.task_id, x_prev.model_tag)
    curr = FeatureMatrix(np.vstack([x_curr.values, ac.values]),
                         np.concatenate([x_curr.labels, ac.labels]),
                         x_curr.task_id, x_curr.model_tag)
    return prev, curr


def run(cfg: RunConfig, stream: Stream | None = None) -> RunReport:
    """Execute the full task loop and return the report.

    `stream` may be passed to reuse one generated stream across methods;
    it must match the config's input settings.
    """
    if stream is None:
        stream = _stream_for(cfg)
    if cfg.method == "oracle" and any(r.gtruth is None for r in stream.records):
        raise ConfigError("oracle method needs simulator ground truth")

    d = stream.d
    clf = LinearClassifier.empty(d)
    bank = GaussianBank()
    counters = {"operator_fits": 0, "mc_compensations": 0, "oracle_pushes": 0}
    timings = {"train_ce": 0.0, "compensate": 0.0, "refine": 0.0, "evaluate": 0.0}
    per_task = []

    for i, rec in enumerate(stream.records):
        t = rec.task_id
        x_prev = l2_normalize(rec.train_prev)
        x_curr = l2_normalize(rec.train_curr)
        new_ids = x_curr.class_ids()
        clf = clf_mod.expand(clf, new_ids)

        tic = time.perf_counter()
        clf = clf_mod.train_ce(clf, x_curr, new_ids,
                               replace(cfg.ce, seed=mix_seed(cfg.seed, t, 1)))
        timings["train_ce"] += time.perf_counter() - tic

        diagnostics = {}
        tic = time.perf_counter()
        if i > 0 and cfg.method != "seqft_baseline" and len(bank):
            bank, diagnostics = _compensate(cfg, rec, x_prev, x_curr,
                                            bank, counters)
        timings["compensate"] += time.perf_counter() - tic

        for c in new_ids:
            bank.add(estimate_gaussian(x_curr.restrict(c), c))

        tic = time.perf_counter()
        clf = clf_mod.refine(clf, bank,
                             replace(cfg.refine, seed=mix_seed(cfg.seed, t, 2)))
        timings["refine"] += time.perf_counter() - tic

        tic = time.perf_counter()
        acc = clf_mod.evaluate(clf, rec.test)
        timings["evaluate"] += time.perf_counter() - tic
        per_task.append({"task_id": t, "accuracy": acc,
                         "diagnostics": diagnostics})

    accs = [e["accuracy"] for e in per_task]
    report = RunReport(
        method=cfg.method,
        per_task=per_task,
        last_acc=accs[-1],
        inc_acc=sum(accs) / len(accs),
        config=cfg.resolved(),
        counters=counters,
        timings=timings,
    )
    if cfg.out:
        write_report(report, cfg.out)
    return report


def _compensate(cfg: RunConfig, rec, x_prev, x_curr, bank: GaussianBank,
                counters: dict):
    """Fit the configured operator and push the whole bank through it."""
    t = rec.task_id
    aux = _aux_pair(rec, cfg)
    diagnostics = {}

    if cfg.method == "alpha1":
        if aux is not None:
            op = fit_with_ade(x_prev, x_curr, aux[0], aux[1],
                              cfg.gamma_a1, cfg.alpha_temp)
        else:
            op = fit_ridge(x_prev, x_curr, cfg.gamma_a1, cfg.alpha_temp)
        op = reweight_identity(op, op.n_fit)
        counters["operator_fits"] += 1
        diagnostics = {"residual_mse": op.residual_mse,
                       "w_applied": op.w_applied, "n_fit": op.n_fit}
        return bank.map(lambda g: linear_pushforward(g, op)), diagnostics

    if cfg.method == "oracle":
        counters["oracle_pushes"] += 1
        return oracle_compensate(bank, rec.gtruth, mix_seed(cfg.seed, t, 3)), {}

    # Learned nonlinear operators share the pair set and the MC loop.
    fit_prev, fit_curr = _concat_pairs(x_prev, x_curr, aux)
    train_cfg = replace(cfg.operator_train, seed=mix_seed(cfg.seed, t, 4))
    if cfg.method == "alpha2":
        op = init_weaknl(x_prev.d, cfg.hidden or x_prev.d,
                         mix_seed(cfg.seed, t, 5), cfg.gamma_a2)
        op = train_weaknl(op, fit_prev, fit_curr, train_cfg)
        diagnostics = {"final_mse": op.final_mse, "c1": op.c1,
                       "n_fit": fit_prev.n}
    else:  # mlpdc
        mlpdc_cfg = (replace(train_cfg, weight_decay=1e-6)
                     if train_cfg.weight_decay == 0 else train_cfg)
        op = train_mlpdc(fit_prev, fit_curr, mlpdc_cfg)
        diagnostics = {"n_fit": fit_prev.n}
    counters["operator_fits"] += 1

    n_samples = cfg.mc_multiplier * x_prev.d

    def push(g):
        counters["mc_compensations"] += 1
        return mc_compensate(op, g, n_samples, mix_seed(cfg.seed, t, g.class_id))

    return bank.map(push), diagnostics


def write_report(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    return out / "report.json"


def compare(cfgs: list[RunConfig]) -> dict:
    """Run several methods on one shared stream and tabulate the deltas."""
    if not cfgs:
        raise ConfigError("compare needs at least one run config")
    head = cfgs[0]
    for cfg in cfgs[1:]:
        if cfg.sim != head.sim or cfg.manifest != head.manifest:
            raise ConfigError("compare requires an identical input stream")
        if cfg.seed != head.seed:
            raise ConfigError("compare requires an identical seed")
    stream = _stream_for(head)
    reports = [run(cfg, stream) for cfg in cfgs]
    base = reports[0]
    rows = []
    for rep in reports:
        rows.append({
            "method": rep.method,
            "last_acc": rep.last_acc,
            "inc_acc": rep.inc_acc,
            "delta_last": rep.last_acc - base.last_acc,
            "delta_inc": rep.inc_acc - base.inc_acc,
        })
    return {"schema": "compare_v1", "rows": rows,
            "reports": [r.to_json() for r in reports]}


def comparison_text(table: dict) -> str:
    header = f"{'method':<16} {'last_acc':>9} {'inc_acc':>9} {'d_last':>8} {'d_inc':>8}"
    lines = [header, "-" * len(header)]
    for row in table["rows"]:
        lines.append(f"{row['method']:<16} {row['last_acc']:>9.4f} "
                     f"{row['inc_acc']:>9.4f} {row['delta_last']:>+8.4f} "
                     f"{row['delta_inc']:>+8.4f}")
    return "\n".join(lines) + "\n"


def joint_reference(stream: Stream, seed: int = 0,
                    cfg: RefineConfig | None = None) -> float:
    """Upper-bound classifier: trained on all tasks' final-space features."""
    cfg = cfg or RefineConfig(steps=3000)
    final = l2_normalize(stream.final_train)
    clf = clf_mod.expand(LinearClassifier.empty(final.d), final.class_ids())
    clf = clf_mod.train_ce(clf, final, final.class_ids(),
                           replace(cfg, seed=seed))
    return clf_mod.evaluate(clf, stream.final_test)
