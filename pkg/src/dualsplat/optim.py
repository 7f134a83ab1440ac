"""Adam over named parameter groups, plus clone/split/prune densification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import GaussianSet, materialize, sigmoid


class OptimError(ValueError):
    pass


@dataclass
class AdamState:
    lr: dict  # group name -> learning rate
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict, lr: dict, **kw) -> "AdamState":
        st = cls(dict(lr), **kw)
        for k, p in params.items():
            st.m[k] = np.zeros(p.shape)
            st.v[k] = np.zeros(p.shape)
        return st

    def check(self, params: dict) -> None:
        for k, p in params.items():
            if k not in self.m:
                raise OptimError(f"no moments for parameter group {k!r}")
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise OptimError(f"moment shape {self.m[k].shape} != parameter shape {p.shape} for {k!r}")

    def remap(self, prefix: str, source: np.ndarray, fresh: np.ndarray) -> None:
        """Reindex the moments of every group under ``prefix`` along axis 0.

        Row ``i`` of the new arrays copies old row ``source[i]``, or is zero
        where ``fresh[i]`` is set.
        """
        for store in (self.m, self.v):
            for k in list(store):
                if not k.startswith(prefix):
                    continue
                old = store[k]
                new = old[source] if len(source) else np.zeros((0,) + old.shape[1:])
                new[fresh] = 0.0
                store[k] = new


def adam_step(state: AdamState, params: dict, grads: dict, lr_scale: dict | None = None) -> dict:
    """One bias-corrected Adam update. Groups missing from ``grads`` are left alone.

    Updates are computed in float64 and cast back to each parameter's dtype.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = dict(params)
    for k, g in grads.items():
        if g is None:
            continue
        p = params[k]
        if g.shape != p.shape:
            raise OptimError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k!r}")
        if k not in state.m:
            raise OptimError(f"unknown parameter group {k!r}")
        lr = state.lr.get(k, 0.0) * (lr_scale or {}).get(k, 1.0)
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[k] = (p.astype(np.float64) - step).astype(p.dtype)
    return out


@dataclass
class DensifyConfig:
    interval: int = 100
    grad_threshold: float = 5e-3
    split_scale: float = 0.01  # fraction of scene extent
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    start: int = 300
    stop: int = 1500
    geo: bool = True
    local: bool = True
    max_primitives: int = 20000

    def validate(self) -> None:
        for name in ("interval", "grad_threshold", "split_scale", "prune_opacity"):
            if getattr(self, name) <= 0:
                raise OptimError(f"densify {name} must be > 0")
        if self.split_factor <= 1:
            raise OptimError("densify split_factor must be > 1")


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    before: int = 0
    after: int = 0


def densify_and_prune(
    gset: GaussianSet,
    grad_accum: np.ndarray,
    counts: np.ndarray,
    cfg: DensifyConfig,
    extent: float,
    rng: np.random.Generator,
    state: AdamState | None = None,
    prefix: str = "",
):
    """Returns ``(new_set, source, fresh, report)``.

    ``grad_accum`` holds summed positional-gradient norms over ``counts``
    visible iterations. High-gradient primitives are cloned when small and
    split in two (scales divided by ``split_factor``, centres resampled on
    the disk) when large. Primitives below the opacity floor are then
    dropped. Adam moments in ``state`` under ``prefix`` are remapped, with
    zeros for every new primitive.
    """
    n = len(gset)
    report = DensifyReport(before=n)
    mean_g = np.where(counts > 0, grad_accum / np.maximum(counts, 1), 0.0)
    hot = mean_g > cfg.grad_threshold
    room = max(cfg.max_primitives - n, 0)
    if hot.sum() > room:
        # keep the strongest ones, ties broken by index
        order = np.lexsort((np.arange(n), -mean_g))
        allowed = np.zeros(n, dtype=bool)
        allowed[order[:room]] = True
        hot &= allowed
    scales = np.exp(gset.log_scales.astype(np.float64))
    big = scales.max(axis=1) > cfg.split_scale * extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    report.cloned = int(clone.size)
    report.split = int(split.size)

    keep = np.flatnonzero(~np.isin(np.arange(n), split))
    source = np.concatenate([keep, clone, split, split]).astype(np.int64)
    fresh = np.zeros(source.size, dtype=bool)
    fresh[keep.size:] = True
    new = gset.select(source)
    if split.size:
        mat = materialize(gset.select(split))
        children = []
        for _ in range(2):
            z = rng.normal(size=(split.size, 2)) * mat.scales
            offs = z[:, :1] * mat.frames[:, :, 0] + z[:, 1:2] * mat.frames[:, :, 1]
            children.append(mat.positions + offs)
        s0 = keep.size + clone.size
        dt = new.centers.dtype
        new.centers[s0:s0 + split.size] = children[0].astype(dt)
        new.centers[s0 + split.size:] = children[1].astype(dt)
        new.log_scales[s0:] -= np.asarray(math.log(cfg.split_factor), dtype=new.log_scales.dtype)

    alive = sigmoid(new.raw_opacities.astype(np.float64)) >= cfg.prune_opacity
    report.pruned = int((~alive).sum())
    new = new.select(alive)
    source = source[alive]
    fresh = fresh[alive]
    report.after = len(new)
    if state is not None:
        state.remap(prefix, source, fresh)
    return new, source, fresh, report


def train(dataset, config, seed=None, **kwargs):
    """Training loop entry point; see :func:`dualsplat.train.train`."""
    from .train import train as _train  # the loop imports this module

    return _train(dataset, config, seed, **kwargs)


__all__ = [
    "AdamState",
    "DensifyConfig",
    "DensifyReport",
    "OptimError",
    "adam_step",
    "densify_and_prune",
    "train",
]
