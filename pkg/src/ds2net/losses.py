"""Segmentation and adversarial losses and the combined generator objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .diffcore import ShapeError, Tensor
from .nets import Discriminator


def seg_ce(logits: Tensor, labels) -> Tensor:
    """Pixel-mean cross-entropy of N x K x H x W logits against N x H x W labels."""
    y = np.asarray(labels)
    if logits.ndim != 4 or y.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"logits {logits.shape} and labels {y.shape} do not line up")
    k = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k or not np.all(y == np.round(y))):
        raise ValueError(f"labels must be integers in [0, {k - 1}]")
    y = y.astype(np.int64)
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, y[:, None], 1.0, axis=1)
    count = y.size
    value = -(onehot * logp).sum() / count

    def bw(g):
        return ((np.exp(logp) - onehot) * (g / count),)

    return Tensor._make(np.asarray(value, dtype=x.dtype), (logits,), bw, "seg_ce")


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a constant label."""
    x = logits.data
    t = x.dtype.type(target)
    value = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    count = x.size

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
        return ((sig - t) * (g / count),)

    return Tensor._make(np.asarray(value, dtype=x.dtype), (logits,), bw, "bce")


def disc_loss(disc: Discriminator, real: Tensor, fake: Tensor) -> Tensor:
    """Critic loss: own-domain features labelled 1, cross-domain features 0.

    The two BCE terms are averaged, so an undecided critic scores ln 2.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} and fake {fake.shape} features differ")
    return (bce_with_logits(disc(real), 1.0) + bce_with_logits(disc(fake), 0.0)) * 0.5


def gen_adv_loss(disc: Discriminator, fake: Tensor, real: Tensor | None = None) -> Tensor:
    """Non-saturating encoder loss; the critic's parameters get no gradient.

    With ``real`` the encoder also pushes its own-domain feature toward the
    critic's "fake" label, and the two terms are averaged. Both features
    come from the same encoder, so this is the gradient of the full min-max
    objective rather than of the cross-domain term alone.
    """
    if real is not None and real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} and fake {fake.shape} features differ")
    with disc.frozen():
        if real is None:
            return bce_with_logits(disc(fake), 1.0)
        return (bce_with_logits(disc(fake), 1.0) + bce_with_logits(disc(real), 0.0)) * 0.5


@dataclass
class LossReport:
    seg_ss: float
    seg_st: float
    adv_Es_gen: float
    adv_Et_gen: float
    adv_Es_disc: float
    adv_Et_disc: float
    total: float
    lambda_Es: float
    lambda_Et: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "objective"]

    def row(self) -> list[float]:
        return [getattr(self, c) for c in self.columns()]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.row())


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(
    seg_ss,
    seg_st,
    adv_Es_gen,
    adv_Et_gen,
    lambda_Es: float,
    lambda_Et: float,
    adv_Es_disc=0.0,
    adv_Et_disc=0.0,
) -> LossReport:
    """seg_ss + seg_st + lambda_Es * adv_Es_gen + lambda_Et * adv_Et_gen.

    Terms may be tensors or floats; when any is a tensor the composed
    objective is kept on the report for ``backward``. Critic losses are only
    recorded, they belong to the opposing update.
    """
    if lambda_Es < 0 or lambda_Et < 0:
        raise ValueError(f"adversarial weights must be non-negative, got {lambda_Es}, {lambda_Et}")
    objective = None
    terms = [(seg_ss, 1.0), (seg_st, 1.0), (adv_Es_gen, lambda_Es), (adv_Et_gen, lambda_Et)]
    for term, w in terms:
        if isinstance(term, Tensor) and w != 0.0:
            part = term if w == 1.0 else term * w
            objective = part if objective is None else objective + part
    total = _value(seg_ss) + _value(seg_st) + lambda_Es * _value(adv_Es_gen) + lambda_Et * _value(adv_Et_gen)
    return LossReport(
        seg_ss=_value(seg_ss),
        seg_st=_value(seg_st),
        adv_Es_gen=_value(adv_Es_gen),
        adv_Et_gen=_value(adv_Et_gen),
        adv_Es_disc=_value(adv_Es_disc),
        adv_Et_disc=_value(adv_Et_disc),
        total=total,
        lambda_Es=float(lambda_Es),
        lambda_Et=float(lambda_Et),
        objective=objective,
    )
