"""Domain-distinct (DDSM) and domain-universal (DUSM) feature selection.

Both modules take one image's pair of style features, ``F_s`` from the
source-side encoder and ``F_t`` from the target-side encoder, each
N x C x H x W (an unbatched C x H x W is accepted too).

DDSM pools the fused pair into a prototype, expands it into two logit
vectors and turns each channel's pair of logits into complementary gates
with a two-way softmax. DUSM builds channel-impact matrices between each
style feature and a fused feature, averages them into a shared mask and
projects the mixed channels to C'' outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .nets import Conv2d, Linear, Module


class DdsmParams(Module):
    """``zero_gates`` zeroes g_s and g_t so every gate starts at exactly 0.5."""

    def __init__(self, rng, channels: int, reduced: int | None = None, zero_gates: bool = False):
        super().__init__()
        reduced = reduced if reduced is not None else max(1, channels // 4)
        if reduced < 1:
            raise ValueError("DDSM bottleneck width must be >= 1")
        self.channels, self.reduced = channels, reduced
        self.f = self.add_child("f", Linear(rng, channels, reduced))
        self.g_s = self.add_child("g_s", Linear(rng, reduced, channels))
        self.g_t = self.add_child("g_t", Linear(rng, reduced, channels))
        if zero_gates:
            self.g_s.weight.data[:] = 0
            self.g_t.weight.data[:] = 0


class DusmParams(Module):
    """``scaled`` divides impact-mask logits by sqrt(HW), as in dot-product attention."""

    def __init__(self, rng, channels: int, projected: int | None = None, scaled: bool = False):
        super().__init__()
        self.scaled = scaled
        projected = projected if projected is not None else max(1, channels // 2)
        self.channels, self.projected = channels, projected
        self.f_c = self.add_child("f_c", Conv2d(rng, channels, channels, 1))
        self.f_cs = self.add_child("f_cs", Conv2d(rng, channels, projected, 1))
        self.f_ct = self.add_child("f_ct", Conv2d(rng, channels, projected, 1))


@dataclass
class SelectorOutput:
    dds: Tensor | None
    dus: Tensor | None
    ds2: Tensor


def _batched(*feats: Tensor) -> tuple[list[Tensor], bool]:
    if all(f.ndim == 3 for f in feats):
        return [f.reshape((1,) + f.shape) for f in feats], True
    if all(f.ndim == 4 for f in feats):
        return list(feats), False
    raise ShapeError(f"expected C x H x W or N x C x H x W features, got {[f.shape for f in feats]}")


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if squeeze else t


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"style features differ in shape: {a.shape} vs {b.shape}")


# -- DDSM -------------------------------------------------------------------------

def ddsm_prototype(f_s: Tensor, f_t: Tensor, params: DdsmParams) -> Tensor:
    """z = f(spatial mean of F_s + F_t); returns N x C' (or C' unbatched)."""
    _check_pair(f_s, f_t)
    (fs, ft), squeeze = _batched(f_s, f_t)
    pooled = dc.reduce("mean", fs + ft, axes=(2, 3))
    z = params.f(pooled)
    return _unbatch(z, squeeze)


def ddsm_gates(z: Tensor, params: DdsmParams) -> tuple[Tensor, Tensor]:
    """Per-channel two-way softmax over (g_s(z), g_t(z)); gates sum to one."""
    squeeze = z.ndim == 1
    if squeeze:
        z = z.reshape((1, z.shape[0]))
    a = params.g_s(z)
    b = params.g_t(z)
    n, c = a.shape
    pair = dc.concat([a.reshape((n, 1, c)), b.reshape((n, 1, c))], axis=1)
    v = dc.softmax(pair, axis=1)
    v_s = dc.slice_axis(v, 1, 0, 1).reshape((n, c))
    v_t = dc.slice_axis(v, 1, 1, 2).reshape((n, c))
    if squeeze:
        return v_s.reshape((c,)), v_t.reshape((c,))
    return v_s, v_t


def _channel_gate(f: Tensor, v: Tensor) -> Tensor:
    if v.shape[-1] != f.shape[1]:
        raise ShapeError(f"gate length {v.shape[-1]} does not match {f.shape[1]} channels")
    if v.ndim == 1:
        v = v.reshape((1, v.shape[0]))
    if v.shape[0] != f.shape[0]:
        raise ShapeError(f"gate batch {v.shape[0]} does not match feature batch {f.shape[0]}")
    return f * v.reshape(v.shape + (1, 1))


def ddsm_apply(f_s: Tensor, f_t: Tensor, v_s: Tensor, v_t: Tensor) -> tuple[Tensor, Tensor]:
    _check_pair(f_s, f_t)
    (fs, ft), squeeze = _batched(f_s, f_t)
    return _unbatch(_channel_gate(fs, v_s), squeeze), _unbatch(_channel_gate(ft, v_t), squeeze)


def ddsm(f_s: Tensor, f_t: Tensor, params: DdsmParams) -> tuple[Tensor, Tensor]:
    v_s, v_t = ddsm_gates(ddsm_prototype(f_s, f_t, params), params)
    return ddsm_apply(f_s, f_t, v_s, v_t)


# -- DUSM -------------------------------------------------------------------------

def dusm_fuse(f_s: Tensor, f_t: Tensor, params: DusmParams) -> Tensor:
    """Z = f_c(F_s + F_t); spatial size is kept (Z rows feed the impact matrix)."""
    _check_pair(f_s, f_t)
    (fs, ft), squeeze = _batched(f_s, f_t)
    return _unbatch(params.f_c(fs + ft), squeeze)


def _rows(f: Tensor) -> Tensor:
    n, c, h, w = f.shape
    return f.reshape((n, c, h * w))


def dusm_impact_mask(f: Tensor, z: Tensor, temperature: float = 1.0) -> Tensor:
    """M[j, i] = softmax over i of <F row i, Z row j> / temperature; rows sum to one."""
    _check_pair(f, z)
    (ff, zz), squeeze = _batched(f, z)
    scores = dc.matmul(_rows(zz), dc.transpose(_rows(ff), (0, 2, 1)))
    if temperature != 1.0:
        scores = dc.scale(scores, 1.0 / temperature)
    m = dc.softmax(scores, axis=-1)
    return _unbatch(m, squeeze)


def dusm_universal_mask(m_s: Tensor, m_t: Tensor) -> Tensor:
    if m_s.shape != m_t.shape:
        raise ShapeError(f"impact masks differ in shape: {m_s.shape} vs {m_t.shape}")
    return dc.scale(m_s + m_t, 0.5)


def dusm_apply(f: Tensor, m_u: Tensor, proj: Conv2d) -> Tensor:
    """F_dus = proj(M_u @ F), with F flattened to C x HW."""
    (ff,), squeeze = _batched(f)
    mu = m_u.reshape((1,) + m_u.shape) if m_u.ndim == 2 else m_u
    n, c, h, w = ff.shape
    if mu.shape != (n, c, c):
        raise ShapeError(f"mask shape {m_u.shape} incompatible with features {f.shape}")
    if proj.c_in != c:
        raise ShapeError(f"projection expects {proj.c_in} channels, features have {c}")
    mixed = dc.matmul(mu, _rows(ff)).reshape((n, c, h, w))
    return _unbatch(proj(mixed), squeeze)


def dusm(f_s: Tensor, f_t: Tensor, params: DusmParams) -> tuple[Tensor, Tensor]:
    z = dusm_fuse(f_s, f_t, params)
    temp = math.sqrt(f_s.shape[-1] * f_s.shape[-2]) if params.scaled else 1.0
    m_u = dusm_universal_mask(dusm_impact_mask(f_s, z, temp), dusm_impact_mask(f_t, z, temp))
    return dusm_apply(f_s, m_u, params.f_cs), dusm_apply(f_t, m_u, params.f_ct)


# -- combined selector -------------------------------------------------------------

class Selector(Module):
    """One DDSM and one DUSM block, shared by every image's style pair."""

    def __init__(
        self,
        rng,
        channels: int,
        reduced: int | None = None,
        projected: int | None = None,
        zero_gates: bool = False,
        scaled: bool = False,
    ):
        super().__init__()
        self.ddsm = self.add_child("ddsm", DdsmParams(rng, channels, reduced, zero_gates))
        self.dusm = self.add_child("dusm", DusmParams(rng, channels, projected, scaled))
        self.channels = channels
        self.projected = self.dusm.projected

    @property
    def out_channels(self) -> int:
        return self.channels + self.projected

    def forward(self, f_s: Tensor, f_t: Tensor, use_ddsm: bool, use_dusm: bool):
        return select(f_s, f_t, self.ddsm, self.dusm, use_ddsm=use_ddsm, use_dusm=use_dusm)


def select(
    f_s: Tensor,
    f_t: Tensor,
    ddsm_params: DdsmParams,
    dusm_params: DusmParams,
    *,
    use_ddsm: bool = True,
    use_dusm: bool = True,
) -> tuple[SelectorOutput, SelectorOutput]:
    """Build the (C + C'')-channel head inputs for the s-style and t-style features.

    Disabled parts are replaced by the raw feature (DDSM off) or by zero
    channels (DUSM off) so head width is the same for every ablation.
    """
    _check_pair(f_s, f_t)
    (fs, ft), squeeze = _batched(f_s, f_t)
    extra = dusm_params.projected
    if use_ddsm:
        dds_s, dds_t = ddsm(fs, ft, ddsm_params)
    else:
        dds_s, dds_t = None, None
    if use_dusm:
        dus_s, dus_t = dusm(fs, ft, dusm_params)
    else:
        dus_s, dus_t = None, None

    outs = []
    for raw, dds, dus in ((fs, dds_s, dus_s), (ft, dds_t, dus_t)):
        base = dds if dds is not None else raw
        ds2 = dc.concat([base, dus], axis=1) if dus is not None else dc.pad_channels(base, extra)
        outs.append(
            SelectorOutput(
                dds=None if dds is None else _unbatch(dds, squeeze),
                dus=None if dus is None else _unbatch(dus, squeeze),
                ds2=_unbatch(ds2, squeeze),
            )
        )
    return outs[0], outs[1]


def gate_complementarity_error(v_s: Tensor, v_t: Tensor) -> float:
    return float(np.max(np.abs(v_s.data + v_t.data - 1.0)))
