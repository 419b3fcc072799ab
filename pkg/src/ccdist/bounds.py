"""Interval bound propagation (IBP) over l-infinity boxes.

All bounds are built from differentiable tensor ops, so the same code serves
verification and certified training. Arithmetic is plain float64 without
outward rounding: the bounds are sound up to floating-point error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Dense, Network, Relu, _require_affine_head, diff_matrix
from .tensor import Tensor, add, affine, as_tensor, einsum, neg, relu


@dataclass
class BoundsPair:
    lower: Tensor
    upper: Tensor

    def __post_init__(self):
        self.lower = as_tensor(self.lower)
        self.upper = as_tensor(self.upper)
        if self.lower.shape != self.upper.shape:
            raise ValueError(f"BoundsPair: lower {self.lower.shape} vs upper {self.upper.shape}")
        gap = self.lower.data - self.upper.data
        if np.any(gap > 1e-9 * (1.0 + np.abs(self.upper.data))):
            raise ValueError("BoundsPair: lower exceeds upper")

    @property
    def shape(self):
        return self.lower.shape

    def contains(self, values, tol: float = 0.0) -> bool:
        v = np.asarray(values.data if isinstance(values, Tensor) else values)
        return bool(np.all(v >= self.lower.data - tol) and np.all(v <= self.upper.data + tol))


@dataclass
class PerturbationSpec:
    """The box ``{x' : ||x' - center||_inf <= eps}``, optionally clipped to ``domain``."""

    center: np.ndarray
    eps: float
    domain: tuple | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center.data if isinstance(self.center, Tensor) else self.center, dtype=np.float64)
        self.eps = float(self.eps)
        if self.eps < 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if self.domain is not None:
            lo, hi = self.domain
            if lo > hi:
                raise ValueError(f"empty input domain {self.domain}")
            self.domain = (float(lo), float(hi))

    def box(self, radius: float | None = None):
        r = self.eps if radius is None else radius
        lo, hi = self.center - r, self.center + r
        if self.domain is not None:
            lo = np.clip(lo, *self.domain)
            hi = np.clip(hi, *self.domain)
        return lo, hi


def input_bounds(spec: PerturbationSpec) -> BoundsPair:
    lo, hi = spec.box()
    return BoundsPair(Tensor(lo), Tensor(hi))


def positive_part(w) -> Tensor:
    return relu(w)


def negative_part(w) -> Tensor:
    return neg(relu(neg(w)))


def affine_bounds(weight, bias, bounds: BoundsPair) -> BoundsPair:
    """Exact interval image of a box under ``W x + b``."""
    weight = as_tensor(weight)
    w_pos, w_neg = positive_part(weight), negative_part(weight)
    lower = add(affine(w_pos, bias, bounds.lower), affine(w_neg, None, bounds.upper))
    upper = add(affine(w_pos, bias, bounds.upper), affine(w_neg, None, bounds.lower))
    return BoundsPair(lower, upper)


def relu_bounds(bounds: BoundsPair) -> BoundsPair:
    return BoundsPair(relu(bounds.lower), relu(bounds.upper))


def ibp_forward(net: Network, spec, tap: int | None = None):
    """Propagate a box through every layer.

    ``spec`` is a :class:`PerturbationSpec` or an input :class:`BoundsPair`.
    Returns ``(layer_bounds, feature_bounds)`` where ``layer_bounds[j]``
    bounds the output of ``net.layers[j]`` and ``feature_bounds`` bounds the
    features at ``tap`` (default: the network's feature cut).
    """
    bounds = spec if isinstance(spec, BoundsPair) else input_bounds(spec)
    if bounds.shape[-1] != net.input_dim:
        raise ValueError(f"input box has {bounds.shape[-1]} features, network expects {net.input_dim}")
    tap = net.feature_cut if tap is None else tap
    layer_bounds = []
    current = bounds
    for layer in net.layers:
        if isinstance(layer, Dense):
            current = affine_bounds(layer.weight, layer.bias, current)
        elif isinstance(layer, Relu):
            current = relu_bounds(current)
        layer_bounds.append(current)
    feature_bounds = bounds if tap == 0 else layer_bounds[tap - 1]
    return layer_bounds, feature_bounds


def diff_head_lower(weight, bias, y, feature_bounds: BoundsPair) -> Tensor:
    """Lower bound of ``(logit_y - logit_i)`` given bounds on the head input.

    Builds ``W~ = (_yI - I) W`` and ``b~ = (_yI - I) b`` and evaluates
    ``[W~]_+ lower + [W~]_- upper + b~``. Row y of ``W~`` is identically zero.
    """
    weight, bias = as_tensor(weight), as_tensor(bias)
    k = weight.shape[0]
    m = diff_matrix(y, k)
    lower, upper = feature_bounds.lower, feature_bounds.upper
    if m.ndim == 2:
        wt = einsum("ij,jw->iw", m, weight)
        bt = einsum("ij,j->i", m, bias)
        return einsum("iw,w->i", positive_part(wt), lower) + einsum("iw,w->i", negative_part(wt), upper) + bt
    if lower.ndim != 2 or lower.shape[0] != m.shape[0]:
        raise ValueError(f"{m.shape[0]} labels for feature bounds of shape {lower.shape}")
    wt = einsum("bij,jw->biw", m, weight)
    bt = einsum("bij,j->bi", m, bias)
    return einsum("biw,bw->bi", positive_part(wt), lower) + einsum("biw,bw->bi", negative_part(wt), upper) + bt


def logit_diff_lower_bound(net: Network, spec, y, layer_bounds=None) -> Tensor:
    """IBP lower bound on ``min over the box of f(x')_y - f(x')_i`` (entry y is 0)."""
    _require_affine_head(net)
    if layer_bounds is None:
        layer_bounds, _ = ibp_forward(net, spec)
    cut = net.feature_cut
    if cut == 0:
        feats = spec if isinstance(spec, BoundsPair) else input_bounds(spec)
    else:
        feats = layer_bounds[cut - 1]
    last = net.layers[-1]
    return diff_head_lower(last.weight, last.bias, y, feats)
