"""Meta-training of the learned optimizer by truncated BPTT.

A scene is consumed in segments of L hops.  Within a segment the filter,
optimizer state, and task buffers evolve exactly as at inference; the chosen
meta loss is computed over the segment and differentiated with respect to the
optimizer weights.  Filter and state carry across segments but enter the next
segment as constants, truncating the gradient at segment boundaries.  The
differentiable path includes the per-hop filter-loss gradient (itself a
function of the filter), so second-order terms are kept.

Optimizer weights are differentiated as independent real/imaginary pairs;
finite differences on the same real parameterization verify the gradients.
"""

import json
import math
from dataclasses import dataclass, field, asdict

import jax
import jax.numpy as jnp
import numpy as np

from . import neural, stream
from .tasks.base import OptimizerSpec, optimizer_step
from .checkpoint import Checkpoint


@dataclass(frozen=True)
class TrainConfig:
    unroll: int = 16
    batch_size: int = 64
    meta_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    clip: float = 10.0
    passes_per_epoch: int = 10
    patience: int = 4
    max_epochs: int = 100
    loss_kind: str = "accumulated"  # accumulated | independent
    log_loss: bool = True
    loss_eps: float = 1e-9
    hidden: int = 32
    feature_set: str = "full"
    seed: int = 0
    halve_lr: bool = True

    def __post_init__(self):
        if self.unroll < 2:
            raise ValueError("unroll must be >= 2 (one applied update)")
        if self.loss_kind not in ("accumulated", "independent"):
            raise ValueError(f"unknown meta loss {self.loss_kind!r}")
        for name in ("batch_size", "meta_lr", "clip", "passes_per_epoch",
                     "patience", "max_epochs", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# Meta losses
# ---------------------------------------------------------------------------


def meta_loss_frame_independent(d_frames, y_frames, log: bool = True,
                                eps: float = 1e-9):
    """Mean squared frequency-domain error over a segment of frames,
    optionally log-compressed as ln(mean + eps)."""
    d_frames = jnp.asarray(d_frames)
    y_frames = jnp.asarray(y_frames)
    if d_frames.shape != y_frames.shape:
        raise ValueError(f"shape mismatch {d_frames.shape} vs {y_frames.shape}")
    linear = jnp.mean(jnp.abs(d_frames - y_frames) ** 2)
    return jnp.log(linear + eps) if log else linear


def meta_loss_frame_accumulated(d_stream, y_stream, log: bool = True,
                                eps: float = 1e-9):
    """Mean squared error on the concatenated time-domain segment output."""
    d_stream = jnp.asarray(d_stream)
    y_stream = jnp.asarray(y_stream)
    if d_stream.shape != y_stream.shape:
        raise ValueError(f"length mismatch {d_stream.shape} vs {y_stream.shape}")
    linear = jnp.mean((d_stream - y_stream) ** 2)
    return jnp.log(linear + eps) if log else linear


# ---------------------------------------------------------------------------
# Real-pair view of the complex weights
# ---------------------------------------------------------------------------


def params_to_real(params):
    return {"re": jax.tree_util.tree_map(jnp.real, params),
            "im": jax.tree_util.tree_map(jnp.imag, params)}


def params_to_complex(rho):
    return jax.tree_util.tree_map(lambda r, i: r + 1j * i, rho["re"],
                                  rho["im"])


def global_norm(tree) -> jnp.ndarray:
    return jnp.sqrt(sum(jnp.sum(jnp.square(g))
                        for g in jax.tree_util.tree_leaves(tree)))


def clip_gradient(grads, clip_value: float):
    """Global-norm clipping: rescale so the total norm is at most the clip."""
    if clip_value <= 0:
        raise ValueError("clip value must be positive")
    norm = global_norm(grads)
    scale = jnp.minimum(1.0, clip_value / jnp.maximum(norm, 1e-30))
    return jax.tree_util.tree_map(lambda g: g * scale, grads)


# ---------------------------------------------------------------------------
# Segment forward/backward
# ---------------------------------------------------------------------------


def _seg_functions(task, cfg: TrainConfig):
    opt_spec = OptimizerSpec("meta", hidden=cfg.hidden,
                             feature_set=cfg.feature_set)

    def seg_loss(rho, carry, xs, target):
        params = params_to_complex(rho)

        def step(c, x):
            theta, psi, tstate = c
            tstate, out = task.step(theta, tstate, x)
            delta, psi, _ = optimizer_step(task, opt_spec, params, psi,
                                           out.opt_in)
            theta = task.constrain(theta + delta)
            return (theta, psi, tstate), (out.d_loss, out.y_loss, out.y_time)

        carry, (d_l, y_l, y_hops) = jax.lax.scan(step, carry, xs)
        if cfg.loss_kind == "independent":
            loss = meta_loss_frame_independent(d_l, y_l, cfg.log_loss,
                                               cfg.loss_eps)
        else:
            c = y_hops.shape[-1]
            loss = meta_loss_frame_accumulated(
                jnp.reshape(target, (-1, c)), jnp.reshape(y_hops, (-1, c)),
                cfg.log_loss, cfg.loss_eps)
        return loss, carry

    def batch_objective(rho, carrys, xs, targets):
        losses, carrys = jax.vmap(seg_loss, in_axes=(None, 0, 0, 0))(
            rho, carrys, xs, targets)
        return jnp.mean(losses), carrys

    return seg_loss, batch_objective


_SEG_CACHE = {}
_FUSED_CACHE = {}


def segment_grad_fn(task, cfg: TrainConfig):
    """Compiled value-and-gradient of the batched segment meta loss.

    The incoming carry (filter, optimizer state, task buffers) is an
    argument, not a differentiated input, which is exactly the TBPTT
    truncation: no gradient flows into previous segments.
    """
    key = (task, cfg)
    if key not in _SEG_CACHE:
        _, batch_objective = _seg_functions(task, cfg)
        _SEG_CACHE[key] = jax.jit(
            jax.value_and_grad(batch_objective, has_aux=True))
    return _SEG_CACHE[key]


def fused_scene_fn(task, cfg: TrainConfig):
    """Whole-scene training pass compiled as one scan over segments.

    Semantically identical to calling the per-segment gradient, clip, and
    Adam update in a Python loop (one weight update per segment), just
    without the dispatch overhead.
    """
    key = (task, cfg)
    if key in _FUSED_CACHE:
        return _FUSED_CACHE[key]
    _, batch_objective = _seg_functions(task, cfg)
    vgrad = jax.value_and_grad(batch_objective, has_aux=True)
    length = cfg.unroll

    def run(rho, m, v, step, lr, carrys, xs, targets, n_seg):
        def body(state, s):
            rho, m, v, step, carrys = state
            xs_seg = jax.tree_util.tree_map(
                lambda a: jax.lax.dynamic_slice_in_dim(
                    a, s * length, length, axis=1), xs)
            tgt = jax.lax.dynamic_slice_in_dim(targets, s * length, length,
                                               axis=1)
            (loss, carrys), grads = vgrad(rho, carrys, xs_seg, tgt)
            grads = clip_gradient(grads, cfg.clip)
            step = step + 1
            rho, m, v = _adam_update(rho, grads, m, v, step, lr, cfg.beta1,
                                     cfg.beta2, cfg.adam_eps)
            return (rho, m, v, step, carrys), loss

        (rho, m, v, step, _), losses = jax.lax.scan(
            body, (rho, m, v, step, carrys), jnp.arange(n_seg))
        return rho, m, v, step, losses

    fn = jax.jit(run, static_argnames=("n_seg",))
    _FUSED_CACHE[key] = fn
    return fn


def init_carry(task, prepared, hidden: int):
    return (task.init_theta(), neural.init_state(task.n_bins, hidden),
            task.init_tstate(prepared))


def unroll_forward(task, params, carry, xs, cfg: TrainConfig):
    """Run one unrolled segment without gradients.

    Returns ``(y_hops, d_freq, y_freq, carry')``; useful for tracing and for
    checking that consecutive segments splice into one longer run.
    """
    if xs_len(xs) < 2:
        raise ValueError("segment must contain at least 2 hops")
    seg_loss_fn, _ = _seg_functions(task, cfg)
    opt_spec = OptimizerSpec("meta", hidden=cfg.hidden,
                             feature_set=cfg.feature_set)

    def step(c, x):
        theta, psi, tstate = c
        tstate, out = task.step(theta, tstate, x)
        delta, psi, _ = optimizer_step(task, opt_spec, params, psi, out.opt_in)
        theta = task.constrain(theta + delta)
        return (theta, psi, tstate), (out.d_loss, out.y_loss, out.y_time)

    carry, (d_l, y_l, y_hops) = jax.lax.scan(step, carry, xs)
    return y_hops, d_l, y_l, carry


def xs_len(xs) -> int:
    return jax.tree_util.tree_leaves(xs)[0].shape[0]


def meta_gradient(task, params, carry, xs, target, cfg: TrainConfig):
    """Gradient of the segment meta loss w.r.t. the real-pair weights.

    Single-scene convenience wrapper around the batched compiled function.
    Raises on a non-finite result.
    """
    rho = params_to_real(params)
    one = lambda t: jax.tree_util.tree_map(lambda x: x[None], t)
    vg = segment_grad_fn(task, cfg)
    (loss, carrys), grads = vg(rho, one(carry), one(xs), one(target))
    if not bool(jnp.isfinite(loss)) or not all(
            bool(jnp.all(jnp.isfinite(g)))
            for g in jax.tree_util.tree_leaves(grads)):
        raise ValueError("non-finite meta gradient in segment")
    carry = jax.tree_util.tree_map(lambda x: x[0], carrys)
    return float(loss), grads, carry


# ---------------------------------------------------------------------------
# Meta optimizer (Adam on the real-pair weights)
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int
    lr: float


def adam_init(rho, lr: float) -> AdamState:
    zeros = lambda t: jax.tree_util.tree_map(jnp.zeros_like, t)
    return AdamState(m=zeros(rho), v=zeros(rho), step=0, lr=lr)


@jax.jit
def _adam_update(rho, grads, m, v, step, lr, beta1, beta2, eps):
    m = jax.tree_util.tree_map(lambda a, g: beta1 * a + (1 - beta1) * g,
                               m, grads)
    v = jax.tree_util.tree_map(lambda a, g: beta2 * a + (1 - beta2) * g * g,
                               v, grads)
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    rho = jax.tree_util.tree_map(
        lambda p, mi, vi: p - lr * (mi / bc1) / (jnp.sqrt(vi / bc2) + eps),
        rho, m, v)
    return rho, m, v


def adam_step(rho, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; gradients must already be clipped."""
    step = state.step + 1
    rho, m, v = _adam_update(rho, grads, state.m, state.v, step, state.lr,
                             cfg.beta1, cfg.beta2, cfg.adam_eps)
    return rho, AdamState(m=m, v=v, step=step, lr=state.lr)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list = field(default_factory=list)
    status: str = "ok"  # ok | aborted


def _tree_stack(items):
    return jax.tree_util.tree_map(lambda *xs: jnp.stack(xs), *items)


def _validation_metric(task, opt_spec, params, prepared_val, val_scenes):
    scores = []
    for prep, scene in zip(prepared_val, val_scenes):
        result = stream.run_prepared(task, opt_spec, prep, params=params)
        scores.append(task.metric(scene, result))
    return float(np.mean(scores))


def train(task, train_scenes, val_scenes, cfg: TrainConfig,
          log_path=None, resume: Checkpoint | None = None,
          progress=None) -> TrainResult:
    """Train the learned optimizer on a scene dataset.

    Per scene the filter and optimizer state start at zero and the scene is
    consumed in unroll-length segments, one meta-update per segment, batched
    over scenes.  An epoch is ``passes_per_epoch`` shuffled passes over the
    training fold; after each epoch the mean validation metric decides the
    schedule: the step size halves after a non-improving epoch and training
    stops once the best score is ``patience`` epochs old.  Returns the
    best-validation weights plus the final state for exact resume.
    """
    from .tasks import task_config

    fused = fused_scene_fn(task, cfg)
    opt_spec = OptimizerSpec("meta", hidden=cfg.hidden,
                             feature_set=cfg.feature_set)
    in_dim = neural.feature_dim(task.groups * task.taps, cfg.feature_set)
    out_dim = task.groups * task.taps

    if resume is not None:
        rho = params_to_real(resume.params)
        adam = AdamState(m=resume.adam_m, v=resume.adam_v,
                         step=resume.adam_step, lr=resume.lr)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch + 1
        history = list(resume.history)
        best_metric = max((h["val_metric"] for h in history),
                          default=-math.inf)
        best_epoch = max(range(len(history)),
                         key=lambda i: history[i]["val_metric"],
                         default=-1) if history else -1
    else:
        params = neural.init_params(cfg.seed, in_dim, out_dim, cfg.hidden)
        rho = params_to_real(params)
        adam = adam_init(rho, cfg.meta_lr)
        rng = np.random.default_rng(cfg.seed + 0x5EED)
        start_epoch = 0
        history = []
        best_metric = -math.inf
        best_epoch = -1

    prepared_train = [task.prepare(s) for s in train_scenes]
    prepared_val = [task.prepare(s) for s in val_scenes]
    n_train = len(prepared_train)
    batch = min(cfg.batch_size, n_train)

    def snapshot(rho_t, adam_t, epoch, status="ok"):
        return Checkpoint(
            params=params_to_complex(rho_t), adam_m=adam_t.m, adam_v=adam_t.v,
            adam_step=adam_t.step, lr=adam_t.lr, config=cfg.to_dict(),
            task=task_config(task), epoch=epoch, history=list(history),
            rng_state=rng.bit_generator.state, status=status)

    best_snapshot = snapshot(rho, adam, start_epoch - 1)
    log_file = open(log_path, "w") if log_path else None
    status = "ok"
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            losses = []
            diverged = False
            for _ in range(cfg.passes_per_epoch):
                order = rng.permutation(n_train)
                for b0 in range(0, n_train - batch + 1, batch):
                    idx = order[b0:b0 + batch]
                    preps = [prepared_train[i] for i in idx]
                    xs = _tree_stack([p["xs"] for p in preps])
                    targets = jnp.stack(
                        [jnp.asarray(p["target"]) for p in preps])
                    carrys = _tree_stack(
                        [init_carry(task, p, cfg.hidden) for p in preps])
                    n_seg = min(p["n_frames"] for p in preps) // cfg.unroll
                    rho_new, m, v, step, seg_losses = fused(
                        rho, adam.m, adam.v, adam.step, adam.lr, carrys, xs,
                        targets, n_seg)
                    seg_losses = np.asarray(seg_losses)
                    if not np.all(np.isfinite(seg_losses)):
                        diverged = True  # keep the pre-batch weights
                        break
                    rho = rho_new
                    adam = AdamState(m=m, v=v, step=int(step), lr=adam.lr)
                    losses.extend(float(x) for x in seg_losses)
                if diverged:
                    break
            if diverged:
                status = "aborted"
                break

            val_metric = _validation_metric(task, opt_spec,
                                            params_to_complex(rho),
                                            prepared_val, val_scenes)
            entry = {"epoch": epoch,
                     "meta_loss": float(np.mean(losses)) if losses else None,
                     "val_metric": val_metric, "lr": adam.lr}
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                log_file.flush()
            if progress:
                progress(entry)

            if val_metric > best_metric:
                best_metric = val_metric
                best_epoch = epoch
                best_snapshot = snapshot(rho, adam, epoch)
            else:
                if cfg.halve_lr:
                    adam = replace_lr(adam, adam.lr / 2.0)
            if epoch - best_epoch >= cfg.patience:
                break
    finally:
        if log_file:
            log_file.close()

    last_snapshot = snapshot(rho, adam, history[-1]["epoch"] if history
                             else start_epoch - 1, status)
    best_snapshot.history = list(history)
    return TrainResult(best=best_snapshot, last=last_snapshot,
                       history=history, status=status)


def replace_lr(state: AdamState, lr: float) -> AdamState:
    return AdamState(m=state.m, v=state.v, step=state.step, lr=lr)
