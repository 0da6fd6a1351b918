"""Small 3D U-Net: parameters, forward pass and analytic backward pass.

Encoder level ``i`` runs two 3x3x3 conv + ReLU blocks with
``base_channels * 2**i`` channels and then a 2x2x2 max-pool.  The
bottleneck doubles channels once more.  Each decoder level upsamples with a
2x2x2 transposed convolution, concatenates the matching encoder output and
runs two conv + ReLU blocks.  A 1x1x1 convolution and a softmax produce the
per-voxel class probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import NumericalError, ShapeError, ValidationError
from . import layers as L
from .loss import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPS, tversky_loss_grad


@dataclass(frozen=True)
class NetworkArchitecture:
    depth: int = 3
    base_channels: int = 8
    num_classes: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise ValidationError(f"invalid architecture {self}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def check_input(self, spatial_shape) -> None:
        step = 2**self.depth
        if any(int(s) % step for s in spatial_shape):
            raise ShapeError(f"patch dims {tuple(spatial_shape)} must be divisible by {step}")

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_channels
        for level in range(self.depth):
            c = self.channels(level)
            shapes[f"enc{level}.conv1.w"] = (c, cin, 3, 3, 3)
            shapes[f"enc{level}.conv1.b"] = (c,)
            shapes[f"enc{level}.conv2.w"] = (c, c, 3, 3, 3)
            shapes[f"enc{level}.conv2.b"] = (c,)
            cin = c
        c = self.channels(self.depth)
        shapes["bottom.conv1.w"] = (c, cin, 3, 3, 3)
        shapes["bottom.conv1.b"] = (c,)
        shapes["bottom.conv2.w"] = (c, c, 3, 3, 3)
        shapes["bottom.conv2.b"] = (c,)
        for level in reversed(range(self.depth)):
            c = self.channels(level)
            shapes[f"dec{level}.up.w"] = (self.channels(level + 1), c, 2, 2, 2)
            shapes[f"dec{level}.up.b"] = (c,)
            shapes[f"dec{level}.conv1.w"] = (c, 2 * c, 3, 3, 3)
            shapes[f"dec{level}.conv1.b"] = (c,)
            shapes[f"dec{level}.conv2.w"] = (c, c, 3, 3, 3)
            shapes[f"dec{level}.conv2.b"] = (c,)
        shapes["head.w"] = (self.num_classes, self.channels(0))
        shapes["head.b"] = (self.num_classes,)
        return shapes


@dataclass
class NetworkParameters:
    architecture: NetworkArchitecture
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    init: str = "he-uniform"

    def __post_init__(self):
        expected = self.architecture.parameter_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValidationError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValidationError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise ValidationError(f"{name} holds non-finite values")
        self.tensors = {name: self.tensors[name] for name in expected}

    @property
    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "NetworkParameters":
        return NetworkParameters(self.architecture,
                                 {k: v.astype(dtype) for k, v in self.tensors.items()}, self.init)

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(self.architecture,
                                 {k: v.copy() for k, v in self.tensors.items()}, self.init)

    def __getitem__(self, name):
        return self.tensors[name]


def _fan_in(name, shape):
    if name.endswith(".up.w"):
        return shape[0]
    return int(np.prod(shape[1:]))


def init_parameters(arch: NetworkArchitecture, seed: int = 0, dtype=np.float32) -> NetworkParameters:
    """He-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.parameter_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            limit = np.sqrt(6.0 / _fan_in(name, shape))
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return NetworkParameters(arch, tensors)


def zero_parameters(arch: NetworkArchitecture, dtype=np.float64) -> NetworkParameters:
    return NetworkParameters(
        arch, {k: np.zeros(s, dtype=dtype) for k, s in arch.parameter_shapes().items()}, "zeros")


def as_batch(patch, dtype) -> np.ndarray:
    """Coerce a VolumeGrid, ``(X,Y,Z)`` or ``(N,X,Y,Z)`` array to ``(N,X,Y,Z,1)``."""
    x = patch.values if hasattr(patch, "values") else patch
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-3 patch or a batch of them, got shape {x.shape}")
    return x[..., None]


def _check_finite(x, name):
    if not np.isfinite(x).all():
        raise NumericalError("non-finite activation", layer=name)


def _forward(params: NetworkParameters, x: np.ndarray, keep: bool):
    arch = params.architecture
    arch.check_input(x.shape[1:4])
    p = params.tensors
    cache = {}

    def conv(name, h):
        y, cols = L.conv3_forward(h, p[f"{name}.w"], p[f"{name}.b"])
        y = L.relu_forward(y)
        _check_finite(y, name)
        if keep:
            cache[name] = (cols, h.shape, y)
        return y

    h = x
    skips = []
    for level in range(arch.depth):
        h = conv(f"enc{level}.conv1", h)
        h = conv(f"enc{level}.conv2", h)
        skips.append(h)
        pre = h.shape
        h, arg = L.maxpool_forward(h)
        if keep:
            cache[f"enc{level}.pool"] = (arg, pre)
    h = conv("bottom.conv1", h)
    h = conv("bottom.conv2", h)
    for level in reversed(range(arch.depth)):
        name = f"dec{level}.up"
        up = L.upconv_forward(h, p[f"{name}.w"], p[f"{name}.b"])
        _check_finite(up, name)
        if keep:
            cache[name] = h
        h = np.concatenate([up, skips[level]], axis=-1)
        h = conv(f"dec{level}.conv1", h)
        h = conv(f"dec{level}.conv2", h)
    logits = L.conv1_forward(h, p["head.w"], p["head.b"])
    _check_finite(logits, "head")
    if keep:
        cache["head"] = h
    return L.softmax(logits), cache


def forward(params: NetworkParameters, patch) -> np.ndarray:
    """Class probabilities, shaped ``(X, Y, Z, C)`` for one patch or ``(N, X, Y, Z, C)`` for a batch."""
    raw = patch.values if hasattr(patch, "values") else np.asarray(patch)
    probs, _ = _forward(params, as_batch(patch, params.dtype), keep=False)
    return probs[0] if np.ndim(raw) == 3 else probs


def backward(params: NetworkParameters, patch, truth, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
             eps=DEFAULT_EPS, frozen=()):
    """Tversky loss of ``forward(params, patch)`` against ``truth`` and its parameter gradients.

    Returns ``(loss, grads)``; ``grads`` omits every name listed in ``frozen``.
    """
    arch = params.architecture
    p = params.tensors
    x = as_batch(patch, params.dtype)
    truth = np.asarray(truth.labels if hasattr(truth, "labels") else truth)
    if truth.ndim == 3:
        truth = truth[None]
    if truth.shape != x.shape[:4]:
        raise ShapeError(f"truth {truth.shape} does not match patch {x.shape[:4]}")
    probs, cache = _forward(params, x, keep=True)
    loss, dprobs = tversky_loss_grad(probs, truth, alpha, beta, eps)
    grads = {}

    def conv_back(name, dy, need_dx=True):
        cols, x_shape, y = cache[name]
        dy = L.relu_backward(dy, y)
        dx, dw, db = L.conv3_backward(dy, cols, p[f"{name}.w"], x_shape, need_dx)
        grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        if need_dx:
            _check_finite(dx, name)
        return dx

    dlogits = L.softmax_backward(dprobs.astype(params.dtype), probs)
    dh, grads["head.w"], grads["head.b"] = L.conv1_backward(dlogits, cache["head"], p["head.w"])
    dskips = {}
    for level in range(arch.depth):
        dh = conv_back(f"dec{level}.conv2", dh)
        dh = conv_back(f"dec{level}.conv1", dh)
        c = arch.channels(level)
        dup, dskips[level] = dh[..., :c], dh[..., c:]
        name = f"dec{level}.up"
        dh, grads[f"{name}.w"], grads[f"{name}.b"] = L.upconv_backward(dup, cache[name], p[f"{name}.w"])
        _check_finite(dh, name)
    dh = conv_back("bottom.conv2", dh)
    dh = conv_back("bottom.conv1", dh)
    for level in reversed(range(arch.depth)):
        arg, pre = cache[f"enc{level}.pool"]
        dh = L.maxpool_backward(dh, arg, pre) + dskips[level]
        dh = conv_back(f"enc{level}.conv2", dh)
        dh = conv_back(f"enc{level}.conv1", dh, need_dx=level > 0)
    frozen = set(frozen)
    return loss, {name: grads[name] for name in p if name not in frozen}


def architecture_to_json(arch: NetworkArchitecture) -> dict:
    return asdict(arch)
