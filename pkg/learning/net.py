"""
Two-tower recurrent predictor written directly in numpy.

The image tower reads the RGB-M(-D) tensor, the force tower the force image;
their outputs are concatenated into the embedding I, which feeds every step
of a rectifier recurrence h_t = relu(W_I·I + W_h·h_{t-1} + b). Each step
emits a softmax over the 18 classes. Backward is exact reverse mode through
time; grad_check compares it against extended-precision finite differences.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from learning.encode import EncodedSample
from learning.loss import sequence_loss, sequence_loss_grad
from simulation.quantize import MAX_STEPS, NUM_CLASSES, ClassWeights, VelocitySequence

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Layer stack or input tensor does not fit the model configuration."""


class StaleTraceError(ValueError):
    """A forward trace was produced by an older version of the parameters."""


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | pool | relu | fc
    kernel: int = 0
    stride: int = 1
    out: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kernel": self.kernel, "stride": self.stride, "out": self.out}


def conv(kernel: int, out: int, stride: int = 1) -> Layer:
    return Layer("conv", kernel=kernel, stride=stride, out=out)


def pool(kernel: int, stride: int | None = None) -> Layer:
    return Layer("pool", kernel=kernel, stride=stride or kernel)


def relu() -> Layer:
    return Layer("relu")


def fc(out: int) -> Layer:
    return Layer("fc", out=out)


@dataclass(frozen=True)
class TowerConfig:
    layers: tuple[Layer, ...]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out

    def shapes(self, in_shape: tuple[int, int, int]) -> list[tuple[int, ...]]:
        """Output shape after every layer; raises ShapeError on an invalid stack."""
        if not self.layers or self.layers[-1].kind != "fc":
            raise ShapeError("a tower must end with a fully-connected layer")
        shapes = []
        shape: tuple[int, ...] = tuple(in_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "pool"):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} ({layer.kind}) follows a flat layer")
                c, h, w = shape
                ho = (h - layer.kernel) // layer.stride + 1
                wo = (w - layer.kernel) // layer.stride + 1
                if layer.kernel < 1 or layer.stride < 1 or ho < 1 or wo < 1:
                    raise ShapeError(f"layer {i} ({layer.kind}) leaves no spatial extent from {shape}")
                shape = (layer.out if layer.kind == "conv" else c, ho, wo)
            elif layer.kind == "fc":
                if layer.out < 1:
                    raise ShapeError(f"layer {i} has non-positive width")
                shape = (layer.out,)
            elif layer.kind != "relu":
                raise ShapeError(f"unknown layer kind {layer.kind!r}")
            shapes.append(shape)
        return shapes

    def to_dict(self) -> dict:
        return {"layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "TowerConfig":
        return cls(tuple(Layer(**layer) for layer in d["layers"]))


@dataclass(frozen=True)
class ModelConfig:
    image_tower: TowerConfig
    force_tower: TowerConfig
    hidden: int
    image_channels: int = 4
    image_size: tuple[int, int] = (64, 64)
    steps: int = MAX_STEPS
    head_rectifier: bool = True
    init_std: float = 0.01
    # initial b_o when head_rectifier is set
    head_bias_init: float = 0.1
    precision: str = "float32"

    @property
    def embed_dim(self) -> int:
        return self.image_tower.embed_dim + self.force_tower.embed_dim

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return {
            "image_tower": self.image_tower.to_dict(),
            "force_tower": self.force_tower.to_dict(),
            "hidden": self.hidden,
            "image_channels": self.image_channels,
            "image_size": list(self.image_size),
            "steps": self.steps,
            "head_rectifier": self.head_rectifier,
            "init_std": self.init_std,
            "head_bias_init": self.head_bias_init,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            image_tower=TowerConfig.from_dict(d["image_tower"]),
            force_tower=TowerConfig.from_dict(d["force_tower"]),
            hidden=int(d["hidden"]),
            image_channels=int(d["image_channels"]),
            image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
            steps=int(d["steps"]),
            head_rectifier=bool(d["head_rectifier"]),
            init_std=float(d["init_std"]),
            head_bias_init=float(d.get("head_bias_init", 0.1)),
            precision=d["precision"],
        )


ARCH_PRESETS = {
    "tiny": (TowerConfig((conv(3, 4), relu(), pool(2), fc(16))), 32),
    "small": (
        TowerConfig((conv(5, 8), relu(), pool(2), conv(5, 16), relu(), pool(2), fc(64))),
        128,
    ),
}


def preset(
    arch: str,
    image_size: int = 64,
    with_depth: bool = False,
    head_rectifier: bool = True,
    precision: str = "float32",
) -> ModelConfig:
    if arch not in ARCH_PRESETS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCH_PRESETS)}")
    tower, hidden = ARCH_PRESETS[arch]
    return ModelConfig(
        image_tower=tower,
        force_tower=tower,
        hidden=hidden,
        image_channels=5 if with_depth else 4,
        image_size=(image_size, image_size),
        head_rectifier=head_rectifier,
        precision=precision,
    )


class PredictorParams:
    """Named weight tensors plus a version counter bumped on every update."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray], version: int = 0):
        self.config = config
        self.tensors = tensors
        self.version = version

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def bump(self) -> None:
        self.version += 1

    def astype(self, dtype) -> "PredictorParams":
        return PredictorParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.version
        )

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


@dataclass
class TowerCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    aux: list[object] = field(default_factory=list)


@dataclass
class ForwardTrace:
    version: int
    embedding: np.ndarray
    image_cache: TowerCache
    force_cache: TowerCache
    pre: np.ndarray  # (T, H) recurrent pre-activations
    hidden: np.ndarray  # (T, H)
    logits_pre: np.ndarray  # (T, 18) before the optional head rectifier
    outputs: np.ndarray  # (T, 18)

    def decisions(self) -> list[np.ndarray]:
        """Every rectifier mask and pooling choice taken in this pass."""
        found = [self.pre > 0, self.logits_pre > 0]
        for cache in (self.image_cache, self.force_cache):
            for aux in cache.aux:
                if isinstance(aux, np.ndarray):
                    found.append(aux)
        return found


def _tower_param_shapes(prefix: str, tower: TowerConfig, in_shape) -> dict[str, tuple[int, ...]]:
    shapes = {}
    current = tuple(in_shape)
    for i, (layer, out_shape) in enumerate(zip(tower.layers, tower.shapes(in_shape))):
        if layer.kind == "conv":
            shapes[f"{prefix}.{i}.W"] = (layer.out, current[0], layer.kernel, layer.kernel)
            shapes[f"{prefix}.{i}.b"] = (layer.out,)
        elif layer.kind == "fc":
            shapes[f"{prefix}.{i}.W"] = (layer.out, int(np.prod(current)))
            shapes[f"{prefix}.{i}.b"] = (layer.out,)
        current = out_shape
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, w = config.image_size
    shapes = _tower_param_shapes("image", config.image_tower, (config.image_channels, h, w))
    shapes.update(_tower_param_shapes("force", config.force_tower, (3, h, w)))
    hidden, classes = config.hidden, NUM_CLASSES
    shapes["W_I"] = (hidden, config.embed_dim)
    shapes["W_h"] = (hidden, hidden)
    shapes["b"] = (hidden,)
    shapes["W_o"] = (classes, hidden)
    shapes["b_o"] = (classes,)
    return shapes


def init_params(seed: int, config: ModelConfig) -> PredictorParams:
    """
    Gaussian(0, init_std) weights, zero biases, identity recurrence.

    With a rectified head b_o starts at head_bias_init so every class logit is
    active at the first step and the initial outputs are still uniform.
    """
    if config.hidden < 1:
        raise ShapeError("hidden size must be positive")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name == "W_h":
            tensors[name] = np.eye(shape[0])
        elif name == "b_o" and config.head_rectifier:
            tensors[name] = np.full(shape, config.head_bias_init)
        elif name.endswith("b") or name == "b_o":
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, config.init_std, size=shape)
    tensors = {k: v.astype(config.dtype) for k, v in tensors.items()}
    return PredictorParams(config, tensors)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k)
    return cols, ho, wo


def _conv_forward(x, W, b, stride):
    o, _, k, _ = W.shape
    cols, ho, wo = _im2col(x, k, stride)
    out = (cols @ W.reshape(o, -1).T).T.reshape(o, ho, wo) + b[:, None, None]
    return out, cols


def _conv_backward(dout, x_shape, cols, W, stride):
    o, c, k, _ = W.shape
    _, ho, wo = dout.shape
    d2 = dout.reshape(o, -1)
    dW = (d2 @ cols).reshape(W.shape)
    db = d2.sum(axis=1)
    dcols = (d2.T @ W.reshape(o, -1)).reshape(ho, wo, c, k, k)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dx[:, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, :, :, i, j].transpose(2, 0, 1)
    return dx, dW, db


def _pool_forward(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    flat = win.reshape(c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, x_shape, arg, k, stride):
    c, ho, wo = dout.shape
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[None, :, None] * stride + di
    cols = np.arange(wo)[None, None, :] * stride + dj
    chans = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    np.add.at(dx, (chans, rows, cols), dout)
    return dx


def _tower_forward(params: PredictorParams, prefix: str, tower: TowerConfig, x: np.ndarray):
    cache = TowerCache()
    for i, layer in enumerate(tower.layers):
        cache.inputs.append(x)
        if layer.kind == "conv":
            x, cols = _conv_forward(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"], layer.stride)
            cache.aux.append(("cols", cols))
        elif layer.kind == "pool":
            x, arg = _pool_forward(x, layer.kernel, layer.stride)
            cache.aux.append(arg)
        elif layer.kind == "relu":
            mask = x > 0
            x = x * mask
            cache.aux.append(mask)
        else:
            x = params[f"{prefix}.{i}.W"] @ x.ravel() + params[f"{prefix}.{i}.b"]
            cache.aux.append(None)
    return x, cache


def _tower_backward(params, prefix, tower, cache, dout, grads):
    for i in reversed(range(len(tower.layers))):
        layer = tower.layers[i]
        x = cache.inputs[i]
        aux = cache.aux[i]
        if layer.kind == "conv":
            dout, dW, db = _conv_backward(dout, x.shape, aux[1], params[f"{prefix}.{i}.W"], layer.stride)
            grads[f"{prefix}.{i}.W"] += dW
            grads[f"{prefix}.{i}.b"] += db
        elif layer.kind == "pool":
            dout = _pool_backward(dout, x.shape, aux, layer.kernel, layer.stride)
        elif layer.kind == "relu":
            dout = dout * aux
        else:
            W = params[f"{prefix}.{i}.W"]
            grads[f"{prefix}.{i}.W"] += np.outer(dout, x.ravel())
            grads[f"{prefix}.{i}.b"] += dout
            dout = (W.T @ dout).reshape(x.shape)


def _check_sample(config: ModelConfig, sample: EncodedSample) -> None:
    h, w = config.image_size
    if sample.rgbm.shape != (config.image_channels, h, w):
        raise ShapeError(f"image tensor {sample.rgbm.shape} != {(config.image_channels, h, w)}")
    if sample.force_image.shape != (3, h, w):
        raise ShapeError(f"force tensor {sample.force_image.shape} != {(3, h, w)}")


def embed_forward(params: PredictorParams, sample: EncodedSample):
    config = params.config
    _check_sample(config, sample)
    dtype = params.dtype
    img, img_cache = _tower_forward(params, "image", config.image_tower, sample.rgbm.astype(dtype, copy=False))
    frc, frc_cache = _tower_forward(params, "force", config.force_tower, sample.force_image.astype(dtype, copy=False))
    return np.concatenate([img, frc]), img_cache, frc_cache


def embed_backward(
    params: PredictorParams,
    image_cache: TowerCache,
    force_cache: TowerCache,
    d_embed: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate tower gradients for dL/dI into grads."""
    config = params.config
    split = config.image_tower.embed_dim
    _tower_backward(params, "image", config.image_tower, image_cache, d_embed[:split], grads)
    _tower_backward(params, "force", config.force_tower, force_cache, d_embed[split:], grads)


def embed(params: PredictorParams, sample: EncodedSample) -> np.ndarray:
    """I = concat(image_tower(rgbm), force_tower(force_image))."""
    return embed_forward(params, sample)[0]


def _recur(params: PredictorParams, embedding: np.ndarray):
    config = params.config
    W_I, W_h, b, W_o, b_o = (params[n] for n in ("W_I", "W_h", "b", "W_o", "b_o"))
    steps, hidden = config.steps, config.hidden
    dtype = W_I.dtype
    pre = np.zeros((steps, hidden), dtype=dtype)
    hs = np.zeros((steps, hidden), dtype=dtype)
    drive = W_I @ embedding + b
    h = None
    for t in range(steps):
        a = drive if h is None else drive + W_h @ h
        h = np.maximum(a, 0)
        pre[t], hs[t] = a, h
    logits_pre = hs @ W_o.T + b_o
    logits = np.maximum(logits_pre, 0) if config.head_rectifier else logits_pre
    return pre, hs, logits_pre, softmax(logits)


def forward(params: PredictorParams, sample: EncodedSample) -> tuple[np.ndarray, ForwardTrace]:
    """Distributions o_0..o_{T-1} as a (T, 18) array, plus the trace for backward."""
    embedding, img_cache, frc_cache = embed_forward(params, sample)
    pre, hs, logits_pre, outputs = _recur(params, embedding)
    trace = ForwardTrace(
        version=params.version,
        embedding=embedding,
        image_cache=img_cache,
        force_cache=frc_cache,
        pre=pre,
        hidden=hs,
        logits_pre=logits_pre,
        outputs=outputs,
    )
    return outputs, trace


def replay(params: PredictorParams, trace: ForwardTrace) -> np.ndarray:
    """Recompute the distributions from a trace's embedding."""
    return _recur(params, trace.embedding)[3]


def decode_greedy(distributions: np.ndarray) -> VelocitySequence:
    """Argmax per step (lowest index on ties), truncated at the first stop."""
    return VelocitySequence.from_tokens(np.argmax(distributions, axis=1))


def backward(
    params: PredictorParams,
    trace: ForwardTrace,
    label: VelocitySequence,
    weights: ClassWeights,
) -> dict[str, np.ndarray]:
    if trace.version != params.version:
        raise StaleTraceError(f"trace from version {trace.version}, params at {params.version}")
    config = params.config
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    W_I, W_h, W_o = params["W_I"], params["W_h"], params["W_o"]

    dlogits = sequence_loss_grad(trace.outputs, label, weights).astype(W_o.dtype)
    if config.head_rectifier:
        dlogits = dlogits * (trace.logits_pre > 0)
    grads["W_o"] += dlogits.T @ trace.hidden
    grads["b_o"] += dlogits.sum(axis=0)
    dh_out = dlogits @ W_o

    d_embed = np.zeros_like(trace.embedding)
    carry = np.zeros(config.hidden, dtype=W_h.dtype)
    for t in reversed(range(config.steps)):
        da = (dh_out[t] + carry) * (trace.pre[t] > 0)
        grads["b"] += da
        grads["W_I"] += np.outer(da, trace.embedding)
        d_embed += W_I.T @ da
        if t > 0:
            grads["W_h"] += np.outer(da, trace.hidden[t - 1])
            carry = W_h.T @ da

    embed_backward(params, trace.image_cache, trace.force_cache, d_embed, grads)
    return grads


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    per_group: dict[str, float]
    checked: int
    excluded: int

    @property
    def excluded_fraction(self) -> float:
        total = self.checked + self.excluded
        return self.excluded / total if total else 0.0


def _same_decisions(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    params: PredictorParams,
    sample: EncodedSample,
    label: VelocitySequence,
    weights: ClassWeights,
    epsilon: float = 1e-5,
    n_coords: int = 600,
    min_per_group: int = 4,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> GradCheckResult:
    """
    Compare backward() against a fourth-order central difference of the loss.

    The numeric side runs in numpy.longdouble. Coordinates whose perturbation
    flips any rectifier or pooling decision are excluded and counted.
    """
    analytic_params = params.astype(np.float64)
    analytic_sample = replace(
        sample,
        rgbm=sample.rgbm.astype(np.float64),
        force_image=sample.force_image.astype(np.float64),
    )
    _, trace = forward(analytic_params, analytic_sample)
    analytic = backward(analytic_params, trace, label, weights)

    wide = params.astype(np.longdouble)
    wide_sample = replace(
        sample,
        rgbm=sample.rgbm.astype(np.longdouble),
        force_image=sample.force_image.astype(np.longdouble),
    )
    _, base_trace = forward(wide, wide_sample)
    base_decisions = base_trace.decisions()

    def loss_at(name, index, delta):
        tensor = wide.tensors[name]
        old = tensor.flat[index]
        tensor.flat[index] = old + delta
        outputs, t = forward(wide, wide_sample)
        tensor.flat[index] = old
        return sequence_loss(outputs, label, weights), _same_decisions(t.decisions(), base_decisions)

    rng = np.random.default_rng(seed)
    total = sum(v.size for v in params.tensors.values())
    eps = np.longdouble(epsilon)
    per_group: dict[str, float] = {}
    checked = excluded = 0
    for name, tensor in params.tensors.items():
        k = min(tensor.size, max(min_per_group, math.ceil(n_coords * tensor.size / total)))
        worst = 0.0
        for index in rng.choice(tensor.size, size=k, replace=False):
            samples = [loss_at(name, int(index), m * eps) for m in (2, 1, -1, -2)]
            if not all(same for _, same in samples):
                excluded += 1
                continue
            (lp2, _), (lp1, _), (lm1, _), (lm2, _) = samples
            numeric = float((-lp2 + 8 * lp1 - 8 * lm1 + lm2) / (12 * eps))
            a = float(analytic[name].flat[int(index)])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, err)
            checked += 1
        per_group[name] = worst
    result = GradCheckResult(
        max_rel_error=max(per_group.values()) if per_group else 0.0,
        per_group=per_group,
        checked=checked,
        excluded=excluded,
    )
    logger.info(
        "grad check: max rel error %.3e over %d coords (%d excluded)",
        result.max_rel_error, checked, excluded,
    )
    return result
