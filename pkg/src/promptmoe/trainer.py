"""AdamW training loop for the prompt-side parameters.

The base model never updates; only the provider's arrays do, in place.
Reproducibility comes from stateless RNG streams keyed by (seed, purpose,
step, micro-step): a resumed run re-derives exactly the draws an
uninterrupted run would have made, so trajectories match bitwise.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from . import methods as mt
from .errors import ConfigError, NumericalError
from .linalg import RngStream


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    warmup_steps: int = 500
    lr: float = 2e-5
    grad_accum: int = 2
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic eval
    checkpoint_dir: str = ""
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.grad_accum < 1:
            raise ConfigError(f"grad_accum must be >= 1, got {self.grad_accum}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"loss_reduction must be sum or mean, got {self.loss_reduction}")


def lr_at(step, cfg):
    """Linear warmup to cfg.lr, constant afterwards."""
    if step < 1:
        raise ConfigError(f"step counts from 1, got {step}")
    return cfg.lr * min(1.0, step / max(1, cfg.warmup_steps))


class AdamWState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.skipped = 0

    def to_arrays(self):
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        out["opt.counters"] = np.array([self.step, self.skipped], dtype=np.int64)
        return out

    def load_arrays(self, arrays):
        for k in self.m:
            self.m[k][...] = arrays[f"opt.m.{k}"]
            self.v[k][...] = arrays[f"opt.v.{k}"]
        self.step, self.skipped = (int(x) for x in arrays["opt.counters"])


def adamw_step(params, grads, state, lr, cfg):
    """One update over all named params, in place. Returns False on a skip.

    A single non-finite gradient aborts the whole step (no partial
    updates) and bumps the skip counter; the optimizer step count only
    advances on applied updates, keeping bias correction honest.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            state.skipped += 1
            return False
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        kernels.adamw_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            state.step,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
            cfg.weight_decay,
        )
    return True


@dataclass
class TrainResult:
    metrics: list
    state: AdamWState
    steps_done: int
    expert_totals: np.ndarray = field(default=None)


def train(
    provider,
    lm,
    cfg,
    batch_fn,
    eval_fn=None,
    metrics_path=None,
    start_step=0,
    state=None,
):
    """Run optimizer steps start_step+1 .. cfg.steps.

    ``batch_fn(step, micro)`` must be a pure function of its arguments so
    resumed runs replay the identical data order. ``eval_fn(step)`` fires
    every cfg.eval_every steps and once at the end.
    """
    params = provider.param_arrays()
    if sum(p.size for p in params.values()) == 0:
        raise ConfigError("no trainable parameters")
    if state is None:
        state = AdamWState(params)
    root = RngStream(cfg.seed)
    base_hash = lm.param_hash()
    n_experts = getattr(provider, "w", np.zeros((0, 0))).shape[0]
    expert_totals = np.zeros(max(n_experts, 1))

    metrics = []
    sink = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for step in range(start_step + 1, cfg.steps + 1):
            accum = {}
            loss_total = 0.0
            token_total = 0
            step_counts = np.zeros(max(n_experts, 1))
            for micro in range(cfg.grad_accum):
                batch = batch_fn(step, micro)
                noise_rng = root.child("noise", step, micro)
                loss, count, decisions = mt.loss_on_batch(
                    provider, lm, batch, rng=noise_rng, training=True
                )
                if not np.isfinite(loss.value):
                    raise NumericalError(
                        f"non-finite loss at step {step} on batch ids {batch.ids[:4]}"
                    )
                loss_total += float(loss.value)
                token_total += count
                objective = (
                    ad.scale(loss, 1.0 / max(count, 1))
                    if cfg.loss_reduction == "mean"
                    else loss
                )
                grads = ad.backward(objective)
                for name, g in grads.items():
                    if name in accum:
                        accum[name] += g
                    else:
                        accum[name] = g.copy()
                if decisions is not None:
                    for d in decisions:
                        for e in d.selected:
                            step_counts[e] += 1
            for name in accum:
                accum[name] /= cfg.grad_accum
            grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in accum.values())))
            lr = lr_at(step, cfg)
            adamw_step(params, accum, state, lr, cfg)
            expert_totals += step_counts
            record = {
                "step": step,
                "lr": lr,
                "loss": loss_total / max(token_total, 1),
                "grad_norm": grad_norm,
                "expert_counts": [int(c) for c in step_counts],
                "skipped": state.skipped,
            }
            metrics.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
            if eval_fn and cfg.eval_every and step % cfg.eval_every == 0:
                if lm.param_hash() != base_hash:
                    raise NumericalError("frozen base model changed during training")
                eval_fn(step)
    finally:
        if sink:
            sink.close()
    if lm.param_hash() != base_hash:
        raise NumericalError("frozen base model changed during training")
    if eval_fn and (not cfg.eval_every or cfg.steps % cfg.eval_every != 0):
        eval_fn(cfg.steps)
    return TrainResult(metrics, state, cfg.steps, expert_totals)


def save_checkpoint(path, provider, state, step, cfg):
    arrays = dict(provider.to_arrays())
    arrays.update(state.to_arrays())
    arrays["train.meta"] = np.array([step, cfg.seed], dtype=np.int64)
    np.savez(path, **arrays)


def load_checkpoint(path, provider):
    """Restore provider arrays; returns (state, completed_step, seed)."""
    with np.load(path) as arrays:
        data = {k: arrays[k] for k in arrays.files}
    provider.load_arrays(data)
    state = AdamWState(provider.param_arrays())
    state.load_arrays(data)
    step, seed = (int(x) for x in data["train.meta"])
    return state, step, seed
