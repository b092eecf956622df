"""Training loops: bilevel alternation, universal pretraining, baselines.

The bilevel loop alternates, for each of T outer iterations, K_alpha
prediction updates against the current surrogate (gradients flow through
the scores into the prediction net) with K_beta surrogate updates that
regress the surrogate onto the true metric loss of fresh batches scored by
the frozen prediction net.  Every phase draws a fresh stratified batch per
step.  Audit mode records parameter checksums at the phase boundaries so
freezing can be verified externally.
"""

from __future__ import annotations

import dataclasses
import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    abs_diff,
    affine_const,
    gather,
    leaky_relu,
    mean_all,
    mul,
    outer_sub,
    softplus,
    add,
)
from .data import BatchSampler, sample_batch, synth_universal_batch
from .metrics import RANKING_METRICS, MetricId, true_loss
from .nets import AdamState, PredictionNet, SurrogateNet, adam_step, clip_gradients

__all__ = [
    "TrainConfig",
    "TraceRecord",
    "AuditRecord",
    "BilevelResult",
    "BaselineResult",
    "TrainingDiverged",
    "CS_WEIGHT_GRID",
    "SURROGATE_MODES",
    "BASELINE_MODES",
    "meta_loss",
    "train_bilevel",
    "train_mode",
    "pretrain_universal",
    "train_baseline",
    "evaluate",
    "mean_meta_gap",
    "trace_to_csv",
    "write_trace",
    "parameter_checksum",
]

SURROGATE_MODES = ("sl-u", "sl-s", "sl-r")
BASELINE_MODES = ("ce", "pr", "cs")

# Cost-sensitive weight candidates for the weighted cross-entropy baseline.
CS_WEIGHT_GRID = (0.3, 0.9, 2.7, 8.1, 24.3, 72.9)


@dataclass
class TrainConfig:
    """Knobs for one training run.

    outer_steps is T; each outer iteration takes k_alpha prediction steps
    and k_beta surrogate steps on fresh stratified batches of batch_size.
    gamma is the training-time decision threshold for thresholded metrics;
    evaluation thresholds are calibrated separately.  record_wall_time=False
    writes 0.0 into the trace so identical runs produce identical bytes.
    """

    metric: MetricId = MetricId.MCR
    mode: str = "sl-s"
    outer_steps: int = 20000
    k_alpha: int = 3
    k_beta: int = 10
    eta_alpha: float = 1e-5
    eta_beta: float = 1e-5
    batch_size: int = 100
    clip_norm: float = 1e-5
    gamma: float = 0.0
    seed: int = 0
    eval_every: int = 1000
    gamma_grid_size: int = 101
    record_wall_time: bool = True
    audit: bool = False
    pretrain_steps: int = 20000
    pretrain_lr: float = 1e-3
    pretrain_p: float = 0.5
    pretrain_mu: float = 0.0
    pretrain_sigma: float = 1.0

    def __post_init__(self):
        if isinstance(self.metric, str):
            self.metric = MetricId(self.metric)
        if self.mode not in SURROGATE_MODES + BASELINE_MODES:
            raise ValueError(
                f"mode must be one of {SURROGATE_MODES + BASELINE_MODES}, got {self.mode!r}"
            )
        for name in ("outer_steps", "k_alpha", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k_beta < 0:
            raise ValueError(f"k_beta must be >= 0, got {self.k_beta}")
        for name in ("eta_alpha", "eta_beta", "clip_norm", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["metric"] = self.metric.value
        return d


@dataclass
class TraceRecord:
    iteration: int
    surrogate_loss: float
    meta_loss: float
    true_train_loss: float
    true_test_loss: float
    wall_ms: float
    alpha_steps: int
    beta_steps: int


TRACE_COLUMNS = (
    "iteration",
    "surrogate_loss",
    "meta_loss",
    "true_train_loss",
    "true_test_loss",
    "wall_ms",
    "alpha_steps",
    "beta_steps",
)


@dataclass
class AuditRecord:
    iteration: int
    surrogate_before_alpha: str
    surrogate_after_alpha: str
    prediction_before_beta: str
    prediction_after_beta: str


@dataclass
class BilevelResult:
    prediction: object
    surrogate: object
    trace: list
    alpha_steps: int
    beta_steps: int
    audit: list | None = None


@dataclass
class BaselineResult:
    prediction: object
    trace: list
    steps: int


class TrainingDiverged(FloatingPointError):
    """Raised when a training loss goes non-finite; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def parameter_checksum(net):
    """Hex digest of a net's parameters plus any running statistics."""
    digest = hashlib.sha256(net.flat.tobytes())
    for _, arr in net.state_arrays():
        digest.update(arr.tobytes())
    return digest.hexdigest()[:16]


def meta_loss(tape, true_value, surrogate_value):
    """|true metric loss - surrogate| as a scalar node.

    The true loss enters as a constant, so the gradient reaches only the
    surrogate side; the subgradient at equality is zero.
    """
    return abs_diff(tape, surrogate_value, float(true_value))


def evaluate(net, dataset, metric, gamma=0.0, batch_size=8192):
    """True loss of a net on a whole split (eval mode, single metric call).

    The forward pass is chunked for memory only; the metric itself is
    computed over every row of the split at once.
    """
    chunks = [
        net.forward_eval(dataset.features[i : i + batch_size])
        for i in range(0, len(dataset), batch_size)
    ]
    scores = np.concatenate(chunks)
    return true_loss(metric, dataset.targets, scores, gamma)


def _trace_row(config, iteration, last_surr, last_meta, prediction, train, test, t0, a_steps, b_steps):
    wall = (time.perf_counter() - t0) * 1000.0 if config.record_wall_time else 0.0
    return TraceRecord(
        iteration=iteration,
        surrogate_loss=last_surr,
        meta_loss=last_meta,
        true_train_loss=evaluate(prediction, train, config.metric, config.gamma),
        true_test_loss=(
            evaluate(prediction, test, config.metric, config.gamma) if test is not None else float("nan")
        ),
        wall_ms=wall,
        alpha_steps=a_steps,
        beta_steps=b_steps,
    )


def train_bilevel(config, train, prediction, surrogate, rng, test=None,
                  snapshot_at=(), on_snapshot=None):
    """Alternating bilevel optimization of prediction and surrogate nets.

    Returns the trained nets, the trace, and exact step counters.  With
    config.audit, parameter checksums at every phase boundary are recorded
    so phase isolation can be asserted from outside.  on_snapshot(i) fires
    once i outer iterations have completed (i=0 fires before any update),
    for each i listed in snapshot_at.
    """
    sampler = BatchSampler(train.targets, config.batch_size, rng)
    snapshots = set(snapshot_at)
    if on_snapshot is not None and 0 in snapshots:
        on_snapshot(0)
    alpha_opt = AdamState(prediction.n_params, config.eta_alpha)
    beta_opt = AdamState(surrogate.n_params, config.eta_beta)
    trace = []
    audit = [] if config.audit else None
    alpha_steps = 0
    beta_steps = 0
    last_surr = float("nan")
    last_meta = float("nan")
    t0 = time.perf_counter()
    for iteration in range(1, config.outer_steps + 1):
        surr_before = parameter_checksum(surrogate) if config.audit else None
        for _ in range(config.k_alpha):
            batch = sample_batch(sampler, train)
            tape = Tape()
            scores = prediction.forward(tape, batch.features, mode="train", rng=rng)
            lhat = surrogate.forward(tape, batch.targets, scores)
            last_surr = float(lhat.data)
            if not np.isfinite(last_surr):
                raise TrainingDiverged(
                    f"non-finite surrogate loss at iteration {iteration}", trace
                )
            prediction.zero_grad()
            surrogate.zero_grad()
            tape.backward(lhat)
            clip_gradients(prediction.flat_grad, config.clip_norm)
            adam_step(alpha_opt, prediction.flat, prediction.flat_grad, prediction.blocks)
            alpha_steps += 1
        surr_after = parameter_checksum(surrogate) if config.audit else None
        pred_before = parameter_checksum(prediction) if config.audit else None
        for _ in range(config.k_beta):
            batch = sample_batch(sampler, train)
            scores = prediction.forward_eval(batch.features)
            ell = true_loss(config.metric, batch.targets, scores, config.gamma)
            tape = Tape()
            lhat = surrogate.forward(tape, batch.targets, scores)
            loss = meta_loss(tape, ell, lhat)
            last_meta = float(loss.data)
            if not np.isfinite(last_meta):
                raise TrainingDiverged(
                    f"non-finite meta loss at iteration {iteration}", trace
                )
            surrogate.zero_grad()
            tape.backward(loss)
            clip_gradients(surrogate.flat_grad, config.clip_norm)
            adam_step(beta_opt, surrogate.flat, surrogate.flat_grad, surrogate.blocks)
            beta_steps += 1
        if config.audit:
            audit.append(
                AuditRecord(
                    iteration=iteration,
                    surrogate_before_alpha=surr_before,
                    surrogate_after_alpha=surr_after,
                    prediction_before_beta=pred_before,
                    prediction_after_beta=parameter_checksum(prediction),
                )
            )
        if iteration % config.eval_every == 0 or iteration == config.outer_steps:
            trace.append(
                _trace_row(
                    config, iteration, last_surr, last_meta, prediction, train, test,
                    t0, alpha_steps, beta_steps,
                )
            )
        if on_snapshot is not None and iteration in snapshots:
            on_snapshot(iteration)
    return BilevelResult(
        prediction=prediction,
        surrogate=surrogate,
        trace=trace,
        alpha_steps=alpha_steps,
        beta_steps=beta_steps,
        audit=audit,
    )


def pretrain_universal(surrogate, metric, rng, steps=20000, batch_size=100,
                       lr=1e-3, p=0.5, mu=0.0, sigma=1.0, clip_norm=None, gamma=0.0):
    """Fit the surrogate to a metric on synthetic label/score batches.

    Labels are Bernoulli(p), scores Normal(mu, sigma); ranking metrics
    resample any single-class batch.  Returns the per-step meta losses.
    """
    opt = AdamState(surrogate.n_params, lr)
    losses = []
    for step in range(1, steps + 1):
        y, scores = synth_universal_batch(batch_size, rng, p=p, mu=mu, sigma=sigma)
        if metric in RANKING_METRICS:
            while y.sum() in (0, y.size):
                y, scores = synth_universal_batch(batch_size, rng, p=p, mu=mu, sigma=sigma)
        ell = true_loss(metric, y, scores, gamma)
        tape = Tape()
        lhat = surrogate.forward(tape, y, scores)
        loss = meta_loss(tape, ell, lhat)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite pretraining loss at step {step}", losses)
        surrogate.zero_grad()
        tape.backward(loss)
        if clip_norm is not None:
            clip_gradients(surrogate.flat_grad, clip_norm)
        adam_step(opt, surrogate.flat, surrogate.flat_grad, surrogate.blocks)
        losses.append(value)
    return losses


def mean_meta_gap(surrogate, batches, metric, gamma=0.0):
    """Mean |true loss - surrogate| over a list of (targets, scores) batches."""
    gaps = [
        abs(true_loss(metric, y, s, gamma) - surrogate.forward_eval(y, s))
        for y, s in batches
    ]
    return float(np.mean(gaps))


def train_mode(config, train, rng, test=None, prediction=None, surrogate=None,
               snapshot_at=(), on_snapshot=None):
    """Run one surrogate-mode training (sl-u, sl-s, or sl-r) end to end.

    sl-u pretrains the surrogate and freezes it (k_beta=0); sl-s starts from
    a random surrogate and runs the full alternation; sl-r pretrains and
    then runs the full alternation.  Snapshot hooks pass through to
    train_bilevel.
    """
    if config.mode not in SURROGATE_MODES:
        raise ValueError(f"train_mode handles {SURROGATE_MODES}, got {config.mode!r}")
    if prediction is None:
        prediction = PredictionNet(train.n_features, dtype=np.float64)
        prediction.init(rng)
    if surrogate is None:
        surrogate = SurrogateNet(dtype=np.float64)
        surrogate.init(rng)
    if config.mode in ("sl-u", "sl-r"):
        pretrain_universal(
            surrogate,
            config.metric,
            rng,
            steps=config.pretrain_steps,
            batch_size=config.batch_size,
            lr=config.pretrain_lr,
            p=config.pretrain_p,
            mu=config.pretrain_mu,
            sigma=config.pretrain_sigma,
            gamma=config.gamma,
        )
    if config.mode == "sl-u":
        config = dataclasses.replace(config, k_beta=0)
    return train_bilevel(config, train, prediction, surrogate, rng, test=test,
                         snapshot_at=snapshot_at, on_snapshot=on_snapshot)


def _baseline_loss(tape, which, y, scores, cs_weight):
    y = np.asarray(y, dtype=np.float64)
    if which == "ce":
        # softplus(s) - s*y is binary cross-entropy on logits
        sp = softplus(tape, scores)
        sy = mul(tape, scores, y)
        return mean_all(tape, add(tape, sp, affine_const(tape, sy, -1.0)))
    if which == "pr":
        pos_idx = np.flatnonzero(y == 1)
        neg_idx = np.flatnonzero(y == 0)
        if pos_idx.size == 0 or neg_idx.size == 0:
            raise ValueError("pairwise ranking loss needs both classes in the batch")
        pos = gather(tape, scores, pos_idx)
        neg = gather(tape, scores, neg_idx)
        margins = affine_const(tape, outer_sub(tape, pos, neg), -1.0, 1.0)
        return mean_all(tape, leaky_relu(tape, margins, 0.0))
    if which == "cs":
        if cs_weight is None:
            raise ValueError(f"cs baseline needs a weight from {CS_WEIGHT_GRID}")
        sp_pos = softplus(tape, affine_const(tape, scores, -1.0))
        sp_neg = softplus(tape, scores)
        weighted = add(
            tape,
            mul(tape, sp_pos, cs_weight * y),
            mul(tape, sp_neg, 1.0 - y),
        )
        return mean_all(tape, weighted)
    raise ValueError(f"baseline must be one of {BASELINE_MODES}, got {which!r}")


def train_baseline(which, config, train, prediction, rng, test=None, cs_weight=None,
                   snapshot_at=(), on_snapshot=None):
    """Train the prediction net against a differentiable baseline loss.

    The step budget is outer_steps * k_alpha, matching the prediction-update
    budget of a bilevel run with the same config.  on_snapshot(step) fires
    once the listed gradient steps have completed (0 fires before any), as
    in train_bilevel.
    """
    sampler = BatchSampler(train.targets, config.batch_size, rng)
    snapshots = set(snapshot_at)
    if on_snapshot is not None and 0 in snapshots:
        on_snapshot(0)
    opt = AdamState(prediction.n_params, config.eta_alpha)
    budget = config.outer_steps * config.k_alpha
    stride = config.eval_every * config.k_alpha
    trace = []
    t0 = time.perf_counter()
    last = float("nan")
    for step in range(1, budget + 1):
        batch = sample_batch(sampler, train)
        tape = Tape()
        scores = prediction.forward(tape, batch.features, mode="train", rng=rng)
        loss = _baseline_loss(tape, which, batch.targets, scores, cs_weight)
        last = float(loss.data)
        if not np.isfinite(last):
            raise TrainingDiverged(f"non-finite {which} loss at step {step}", trace)
        prediction.zero_grad()
        tape.backward(loss)
        clip_gradients(prediction.flat_grad, config.clip_norm)
        adam_step(opt, prediction.flat, prediction.flat_grad, prediction.blocks)
        if step % stride == 0 or step == budget:
            wall = (time.perf_counter() - t0) * 1000.0 if config.record_wall_time else 0.0
            trace.append(
                TraceRecord(
                    iteration=step,
                    surrogate_loss=last,
                    meta_loss=float("nan"),
                    true_train_loss=evaluate(prediction, train, config.metric, config.gamma),
                    true_test_loss=(
                        evaluate(prediction, test, config.metric, config.gamma)
                        if test is not None
                        else float("nan")
                    ),
                    wall_ms=wall,
                    alpha_steps=step,
                    beta_steps=0,
                )
            )
        if on_snapshot is not None and step in snapshots:
            on_snapshot(step)
    return BaselineResult(prediction=prediction, trace=trace, steps=budget)


def trace_to_csv(records):
    """Render trace records as CSV text with full float precision."""
    lines = [",".join(TRACE_COLUMNS)]
    for r in records:
        lines.append(
            ",".join(
                (
                    str(r.iteration),
                    repr(r.surrogate_loss),
                    repr(r.meta_loss),
                    repr(r.true_train_loss),
                    repr(r.true_test_loss),
                    repr(r.wall_ms),
                    str(r.alpha_steps),
                    str(r.beta_steps),
                )
            )
        )
    return "\n".join(lines) + "\n"


def write_trace(records, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(trace_to_csv(records))
