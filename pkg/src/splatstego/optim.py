"""Named parameter groups and the AdamW update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tensor

ROLES = ("theta", "phi", "psi")


class MissingGradientError(RuntimeError):
    pass


@dataclass
class ParamGroup:
    name: str
    role: str
    param: Tensor
    grad: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0
    count: Optional[np.ndarray] = None  # per-element update counts once a masked step has happened


@dataclass
class ParamStore:
    """Ordered, role-tagged parameter tensors with AdamW state.

    Roles: ``theta`` (generator), ``phi`` (injector), ``psi`` (decoder).
    """

    groups: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)  # frozen arrays that travel with the parameters

    def add(self, name: str, role: str, value: np.ndarray) -> Tensor:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        if name in self.groups:
            raise KeyError(f"duplicate parameter group {name!r}")
        t = Tensor(np.array(value), requires_grad=True, name=name)
        self.groups[name] = ParamGroup(name, role, t)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.groups[name].param

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def names(self, roles: Optional[Iterable[str]] = None) -> list:
        if roles is None:
            return list(self.groups)
        roles = set(roles)
        return [n for n, g in self.groups.items() if g.role in roles]

    def tensors(self, roles: Optional[Iterable[str]] = None) -> list:
        return [self.groups[n].param for n in self.names(roles)]

    def set_grads(self, names: Iterable[str], grads: Iterable[np.ndarray]) -> None:
        for n, g in zip(names, grads):
            grp = self.groups[n]
            if g.shape != grp.param.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {grp.param.shape} for {n}")
            grp.grad = np.asarray(g, dtype=grp.param.dtype)

    def zero_grads(self) -> None:
        for g in self.groups.values():
            g.grad = None

    def num_params(self, roles=None) -> int:
        return int(sum(self.groups[n].param.data.size for n in self.names(roles)))

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with parameters cast (moments are dropped)."""
        out = ParamStore(buffers={k: v.astype(dtype) for k, v in self.buffers.items()})
        for n, g in self.groups.items():
            out.add(n, g.role, g.param.data.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(buffers={k: v.copy() for k, v in self.buffers.items()})
        for n, g in self.groups.items():
            t = out.add(n, g.role, g.param.data.copy())
            ng = out.groups[n]
            ng.m = None if g.m is None else g.m.copy()
            ng.v = None if g.v is None else g.v.copy()
            ng.step = g.step
            ng.count = None if g.count is None else g.count.copy()
            del t
        return out


def adamw_step(
    store: ParamStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    roles: Optional[Iterable[str]] = None,
    names: Optional[Iterable[str]] = None,
    masks: Optional[dict] = None,
) -> ParamStore:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Only groups selected by ``roles``/``names`` are touched; each of them must
    carry a gradient. Updates are applied in place and the store is returned.

    ``masks`` maps group names to 0/1 arrays. Coordinates with mask 0 are
    frozen outright: parameter, moments and bias-correction count stay as
    they were, so a masked coordinate neither drifts on stale momentum nor
    receives an inflated step once it is unmasked.
    """
    selected = list(names) if names is not None else store.names(roles)
    masks = masks or {}
    for n in selected:
        grp = store.groups[n]
        if grp.grad is None:
            raise MissingGradientError(f"no gradient for parameter group {n!r}")
        if n in masks and np.shape(masks[n]) != grp.param.shape:
            raise ValueError(f"mask shape {np.shape(masks[n])} != parameter shape {grp.param.shape} for {n}")
    for n in selected:
        grp = store.groups[n]
        p = grp.param.data
        dt = p.dtype.type
        g = grp.grad
        if grp.m is None:
            grp.m = np.zeros_like(p)
            grp.v = np.zeros_like(p)
        grp.step += 1
        if n not in masks and grp.count is None:
            t = grp.step
            grp.m = dt(beta1) * grp.m + dt(1 - beta1) * g
            grp.v = dt(beta2) * grp.v + dt(1 - beta2) * (g * g)
            mhat = grp.m / dt(1 - beta1 ** t)
            vhat = grp.v / dt(1 - beta2 ** t)
            new = p * dt(1 - lr * weight_decay) if weight_decay else p.copy()
            new = new - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
            grp.param.data = new.astype(p.dtype, copy=False)
            continue
        if grp.count is None:
            grp.count = np.full(p.shape, grp.step - 1, dtype=np.int64)
        keep = np.ones(p.shape, bool) if n not in masks else np.asarray(masks[n]) != 0
        grp.count = grp.count + keep
        t = np.maximum(grp.count, 1)
        m = dt(beta1) * grp.m + dt(1 - beta1) * g
        v = dt(beta2) * grp.v + dt(1 - beta2) * (g * g)
        mhat = m / (1 - beta1 ** t).astype(p.dtype)
        vhat = v / (1 - beta2 ** t).astype(p.dtype)
        new = p * dt(1 - lr * weight_decay) if weight_decay else p.copy()
        new = new - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
        grp.m = np.where(keep, m, grp.m)
        grp.v = np.where(keep, v, grp.v)
        grp.param.data = np.where(keep, new, p).astype(p.dtype, copy=False)
    return store
