"""Feed-forward ReLU classifiers split into a feature map and a classification head.

A :class:`Network` is an ordered list of :class:`Dense` and :class:`Relu`
layers. ``layers[:feature_cut]`` is the feature map ``h`` and
``layers[feature_cut:]`` the head ``g``; by default the cut sits right before
the last affine layer, so the head is a single :class:`Dense`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, affine, as_tensor, einsum, relu

CHECKPOINT_MAGIC = "NNCKPT v1"


class CheckpointError(ValueError):
    pass


@dataclass
class Dense:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"Dense: weight {self.weight.shape} and bias {self.bias.shape} do not conform"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x):
        return affine(self.weight, self.bias, x)


class Relu:
    def __call__(self, x):
        return relu(x)

    def __repr__(self):
        return "Relu()"


class Network:
    def __init__(self, layers, feature_cut: int | None = None):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("Network needs at least one layer")
        dense = [layer for layer in self.layers if isinstance(layer, Dense)]
        if not dense:
            raise ValueError("Network needs at least one Dense layer")
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if width is not None and layer.in_features != width:
                    raise ValueError(
                        f"layer {i}: expects {layer.in_features} inputs but previous layer gives {width}"
                    )
                width = layer.out_features
            elif not isinstance(layer, Relu):
                raise TypeError(f"layer {i}: unsupported layer type {type(layer).__name__}")
        if not isinstance(self.layers[-1], Dense):
            raise ValueError("the last layer must be Dense (it produces the logits)")
        self.classes = width
        if feature_cut is None:
            feature_cut = len(self.layers) - 1
        if not 0 <= feature_cut < len(self.layers):
            raise ValueError(f"feature_cut {feature_cut} outside [0, {len(self.layers)})")
        self.feature_cut = feature_cut

    @property
    def input_dim(self) -> int:
        first = next(layer for layer in self.layers if isinstance(layer, Dense))
        return first.in_features

    @property
    def head_is_affine(self) -> bool:
        head = self.layers[self.feature_cut :]
        return len(head) == 1 and isinstance(head[0], Dense)

    def feature_dim(self, tap: int | None = None) -> int:
        tap = self.feature_cut if tap is None else tap
        width = self.input_dim
        for layer in self.layers[:tap]:
            if isinstance(layer, Dense):
                width = layer.out_features
        return width

    def dense_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, Dense)]

    def parameters(self) -> list:
        params = []
        for layer in self.dense_layers():
            params.extend([layer.weight, layer.bias])
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def activations(self, x) -> list:
        """Outputs of every layer, in order, for input ``x``."""
        out = []
        h = as_tensor(x)
        if h.shape[-1] != self.input_dim:
            raise ValueError(f"input has {h.shape[-1]} features, network expects {self.input_dim}")
        for layer in self.layers:
            h = layer(h)
            out.append(h)
        return out

    def features(self, x, tap: int | None = None) -> Tensor:
        tap = self.feature_cut if tap is None else tap
        h = as_tensor(x)
        if h.shape[-1] != self.input_dim:
            raise ValueError(f"input has {h.shape[-1]} features, network expects {self.input_dim}")
        for layer in self.layers[:tap]:
            h = layer(h)
        return h

    def head(self, features, tap: int | None = None) -> Tensor:
        tap = self.feature_cut if tap is None else tap
        h = features
        for layer in self.layers[tap:]:
            h = layer(h)
        return h

    def forward_with_features(self, x, tap: int | None = None):
        feats = self.features(x, tap)
        return self.head(feats, tap), feats

    def __call__(self, x) -> Tensor:
        return self.forward_with_features(x)[0]

    forward = __call__

    def detached(self) -> "Network":
        """Same weights (shared memory), no gradient tracking."""
        return self._rebuild(lambda t: t.detach())

    def copy(self, requires_grad: bool = True) -> "Network":
        return self._rebuild(lambda t: Tensor(t.data.copy(), requires_grad=requires_grad))

    def frozen(self) -> "Network":
        return self.copy(requires_grad=False)

    def _rebuild(self, convert) -> "Network":
        layers = [
            Dense(convert(layer.weight), convert(layer.bias)) if isinstance(layer, Dense) else Relu()
            for layer in self.layers
        ]
        return Network(layers, self.feature_cut)

    def __repr__(self):
        dims = [self.input_dim] + [layer.out_features for layer in self.dense_layers()]
        return f"Network({'-'.join(map(str, dims))}, feature_cut={self.feature_cut})"


def forward(net: Network, x) -> Tensor:
    return net(x)


def diff_matrix(y, k: int) -> np.ndarray:
    """``(_yI^k - I^k)``: maps logits to (logit_y - logit_i) for every i.

    ``y`` may be a single label (result [k, k]) or a batch (result [B, k, k]).
    """
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range for {k} classes: {y}")
    if y.ndim == 0:
        m = -np.eye(k)
        m[:, int(y)] += 1.0
        return m
    m = np.broadcast_to(-np.eye(k), (len(y), k, k)).copy()
    m[np.arange(len(y)), :, y] += 1.0
    return m


def logit_diffs_from_logits(logits, y) -> Tensor:
    logits = as_tensor(logits)
    m = diff_matrix(y, logits.shape[-1])
    if m.ndim == 2:
        if logits.ndim != 1:
            raise ValueError(f"single label given for a batch of logits {logits.shape}")
        return einsum("ij,j->i", m, logits)
    if logits.ndim != 2 or logits.shape[0] != m.shape[0]:
        raise ValueError(f"{m.shape[0]} labels for logits of shape {logits.shape}")
    return einsum("bij,bj->bi", m, logits)


def logit_diffs(net: Network, x, y) -> Tensor:
    """``f(x)_y - f(x)_i`` for every class i; the y entry is exactly 0."""
    return logit_diffs_from_logits(net(x), y)


@dataclass
class LogitDiffHead:
    weight: Tensor  # [k, w] or [B, k, w]
    bias: Tensor  # [k] or [B, k]
    label: object

    def __call__(self, features) -> Tensor:
        features = as_tensor(features)
        if self.weight.ndim == 2:
            return einsum("ij,j->i", self.weight, features) + self.bias
        return einsum("bij,bj->bi", self.weight, features) + self.bias


def _require_affine_head(net: Network):
    if not net.head_is_affine:
        raise ValueError(
            "the classification head must be a single affine layer "
            f"(layers[{net.feature_cut}:] = {net.layers[net.feature_cut:]})"
        )


def make_logit_diff_head(net: Network, y) -> LogitDiffHead:
    """Compose the affine head with the logit-difference operator."""
    _require_affine_head(net)
    last = net.layers[-1]
    m = diff_matrix(y, net.classes)
    if m.ndim == 2:
        return LogitDiffHead(einsum("ij,jw->iw", m, last.weight), einsum("ij,j->i", m, last.bias), y)
    return LogitDiffHead(einsum("bij,jw->biw", m, last.weight), einsum("bij,j->bi", m, last.bias), y)


def init(net_spec, seed: int) -> Network:
    """Dense/ReLU stack with N(0, 1/fan_in) weights and zero biases."""
    sizes = [int(s) for s in net_spec]
    if len(sizes) < 2:
        raise ValueError(f"net spec needs at least input and output sizes, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append(Dense(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
        if i < len(sizes) - 2:
            layers.append(Relu())
    return Network(layers)


# ---------------------------------------------------------------- checkpoints


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def save(net: Network, path) -> None:
    lines = [
        CHECKPOINT_MAGIC,
        f"layers {len(net.layers)}  feature_cut {net.feature_cut}  classes {net.classes}",
    ]
    for layer in net.layers:
        if isinstance(layer, Relu):
            lines.append("relu")
        else:
            lines.append(f"dense {layer.in_features} {layer.out_features}")
            lines.append("W " + _fmt(layer.weight.data))
            lines.append("b " + _fmt(layer.bias.data))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _read_block(lines, pos, tag, expected):
    lineno = pos + 1
    if pos >= len(lines):
        raise CheckpointError(f"line {lineno}: expected '{tag}' block with {expected} values, found end of file")
    parts = lines[pos].split()
    if not parts or parts[0] != tag:
        raise CheckpointError(f"line {lineno}: expected '{tag}' block, got {lines[pos][:40]!r}")
    if len(parts) - 1 != expected:
        raise CheckpointError(f"line {lineno}: '{tag}' block expected {expected} values, found {len(parts) - 1}")
    try:
        return np.array([float(v) for v in parts[1:]])
    except ValueError as exc:
        raise CheckpointError(f"line {lineno}: bad number in '{tag}' block ({exc})") from None


def load(path, requires_grad: bool = True) -> Network:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise CheckpointError(f"line 1: missing magic line {CHECKPOINT_MAGIC!r}")
    header = lines[1].split() if len(lines) > 1 else []
    if len(header) != 6 or header[0::2] != ["layers", "feature_cut", "classes"]:
        raise CheckpointError("line 2: expected 'layers <n>  feature_cut <i>  classes <k>'")
    try:
        n_layers, cut, classes = (int(v) for v in header[1::2])
    except ValueError:
        raise CheckpointError("line 2: layer count, feature cut and classes must be integers") from None
    layers, pos = [], 2
    for _ in range(n_layers):
        if pos >= len(lines):
            raise CheckpointError(f"line {pos + 1}: expected {n_layers} layers, file ends after {len(layers)}")
        parts = lines[pos].split()
        if parts == ["relu"]:
            layers.append(Relu())
            pos += 1
            continue
        if len(parts) != 3 or parts[0] != "dense":
            raise CheckpointError(f"line {pos + 1}: expected 'relu' or 'dense <in> <out>', got {lines[pos][:40]!r}")
        try:
            n_in, n_out = int(parts[1]), int(parts[2])
        except ValueError:
            raise CheckpointError(f"line {pos + 1}: dense sizes must be integers") from None
        w = _read_block(lines, pos + 1, "W", n_in * n_out).reshape(n_out, n_in)
        b = _read_block(lines, pos + 2, "b", n_out)
        layers.append(Dense(Tensor(w, requires_grad=requires_grad), Tensor(b, requires_grad=requires_grad)))
        pos += 3
    if pos != len(lines):
        raise CheckpointError(f"line {pos + 1}: unexpected trailing content")
    try:
        net = Network(layers, cut)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"inconsistent network: {exc}") from None
    if net.classes != classes:
        raise CheckpointError(f"line 2: header says {classes} classes, last layer has {net.classes}")
    return net
