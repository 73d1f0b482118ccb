"""Two-layer embedding network ("f2nn") mapping feature vectors to signatures.

    x -> W1 x + b1 -> activation -> W2 h + b2 -> normalization -> signature

Normalization is either per-coordinate batch normalization followed by a
fixed scalar multiplier, or row-wise L2 normalization to a fixed norm. In
both modes ``norm_scale`` is the target signature norm (``sqrt(d)`` by
default); batch-normalized coordinates already have unit variance, so the
multiplier applied after batch norm is ``norm_scale / sqrt(d)``.
"""
import math
import struct
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from ._io import Reader, atomic_write
from .errors import BatchTooSmall, DegenerateInput, DimensionError, FormatError, StateError

ACTIVATIONS = ("sigmoid", "relu", "tanh", "linear")
NORMALIZATIONS = ("batch_norm", "l2_scaled")
PARAM_NAMES = ("W1", "b1", "W2", "b2", "bn_gain", "bn_bias")
BUFFER_NAMES = ("bn_running_mean", "bn_running_var")

MODEL_MAGIC = b"F2NN"
MODEL_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 8192
    hidden_dim: int = 2048
    signature_dim: int = 512
    hidden_activation: str = "sigmoid"
    normalization: str = "batch_norm"
    norm_scale: float | None = None
    batch_norm_epsilon: float = 1e-5
    batch_norm_momentum: float = 0.9

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "signature_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {ACTIVATIONS}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.norm_scale is None:
            object.__setattr__(self, "norm_scale", math.sqrt(self.signature_dim))
        if not self.norm_scale > 0:
            raise ValueError("norm_scale must be positive")
        if not self.batch_norm_epsilon > 0:
            raise ValueError("batch_norm_epsilon must be positive")
        if not 0 < self.batch_norm_momentum < 1:
            raise ValueError("batch_norm_momentum must lie in (0, 1)")

    @property
    def output_multiplier(self) -> float:
        if self.normalization == "l2_scaled":
            return float(self.norm_scale)
        return float(self.norm_scale) / math.sqrt(self.signature_dim)


class EmbeddingNetwork:
    """Parameters and running statistics of one network.

    ``version`` increases whenever an optimizer writes new parameter values;
    forward caches remember the version they were produced under.
    """

    def __init__(self, config: NetworkConfig, W1, b1, W2, b2, bn_gain, bn_bias,
                 bn_running_mean, bn_running_var):
        self.config = config
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2
        self.bn_gain, self.bn_bias = bn_gain, bn_bias
        self.bn_running_mean, self.bn_running_var = bn_running_mean, bn_running_var
        self.version = 0
        self._check()

    def _check(self):
        c = self.config
        expected = {
            "W1": (c.hidden_dim, c.input_dim), "b1": (c.hidden_dim,),
            "W2": (c.signature_dim, c.hidden_dim), "b2": (c.signature_dim,),
            "bn_gain": (c.signature_dim,), "bn_bias": (c.signature_dim,),
            "bn_running_mean": (c.signature_dim,), "bn_running_var": (c.signature_dim,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.bn_running_var <= 0):
            raise ValueError("bn_running_var must be strictly positive")

    @property
    def dtype(self):
        return self.W1.dtype

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def buffers(self) -> dict:
        return {name: getattr(self, name) for name in BUFFER_NAMES}

    def state(self) -> dict:
        return {**self.params(), **self.buffers()}

    def mark_updated(self):
        self.version += 1

    def copy(self) -> "EmbeddingNetwork":
        return EmbeddingNetwork(self.config, **{k: v.copy() for k, v in self.state().items()})

    def astype(self, dtype) -> "EmbeddingNetwork":
        return EmbeddingNetwork(self.config, **{k: v.astype(dtype) for k, v in self.state().items()})

    def embed(self, features, chunk: int = 4096) -> np.ndarray:
        """Eval-mode signatures for an ``(N, input_dim)`` array, computed in chunks."""
        features = np.asarray(features)
        if features.shape[0] == 0:
            return np.zeros((0, self.config.signature_dim), dtype=self.dtype)
        out = [forward(self, features[i:i + chunk], mode="eval")[0]
               for i in range(0, features.shape[0], chunk)]
        return np.concatenate(out, axis=0)

    def __repr__(self):
        c = self.config
        return (f"EmbeddingNetwork({c.input_dim}->{c.hidden_dim}->{c.signature_dim}, "
                f"{c.hidden_activation}, {c.normalization}, dtype={self.dtype})")


@dataclass
class ForwardCache:
    mode: str
    token: tuple
    x: np.ndarray
    z1: np.ndarray
    h: np.ndarray
    z2: np.ndarray
    # batch_norm
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    # l2_scaled
    row_norm: np.ndarray | None = None


@dataclass
class Gradients:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    bn_gain: np.ndarray
    bn_bias: np.ndarray
    input: np.ndarray

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}


def init_kaiming(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> EmbeddingNetwork:
    """Zero-mean normal weights with variance 2 / fan_in; zero biases; unit gains."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, math.sqrt(2.0 / config.input_dim), (config.hidden_dim, config.input_dim))
    W2 = rng.normal(0.0, math.sqrt(2.0 / config.hidden_dim), (config.signature_dim, config.hidden_dim))
    d = config.signature_dim
    return EmbeddingNetwork(
        config,
        W1=W1.astype(dtype), b1=np.zeros(config.hidden_dim, dtype),
        W2=W2.astype(dtype), b2=np.zeros(d, dtype),
        bn_gain=np.ones(d, dtype), bn_bias=np.zeros(d, dtype),
        bn_running_mean=np.zeros(d, dtype), bn_running_var=np.ones(d, dtype),
    )


def _activate(kind, z):
    if kind == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "tanh":
        return np.tanh(z)
    return z.copy()


def _activation_grad(kind, z, h):
    if kind == "sigmoid":
        return h * (1 - h)
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1 - h * h
    return np.ones_like(z)


def forward(net: EmbeddingNetwork, batch, mode: str = "eval"):
    """Embed a ``(B, input_dim)`` batch; returns ``(signatures, cache)``.

    Train mode with batch normalization uses batch statistics and updates the
    running averages; eval mode is a pure function of parameters and input.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = net.config
    x = np.asarray(batch)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(f"batch of shape {x.shape} does not have width {cfg.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains NaN or Inf")
    x = x.astype(net.dtype, copy=False)
    B = x.shape[0]

    z1 = x @ net.W1.T + net.b1
    h = _activate(cfg.hidden_activation, z1)
    z2 = h @ net.W2.T + net.b2
    cache = ForwardCache(mode=mode, token=(id(net), net.version), x=x, z1=z1, h=h, z2=z2)
    mult = cfg.output_multiplier

    if cfg.normalization == "batch_norm":
        eps = cfg.batch_norm_epsilon
        if mode == "train":
            if B < 2:
                raise BatchTooSmall("batch normalization in train mode needs at least 2 rows")
            mean = z2.mean(axis=0)
            var = z2.var(axis=0)
            m = cfg.batch_norm_momentum
            net.bn_running_mean[...] = m * net.bn_running_mean + (1 - m) * mean
            net.bn_running_var[...] = m * net.bn_running_var + (1 - m) * var
        else:
            mean, var = net.bn_running_mean, net.bn_running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (z2 - mean) * inv_std
        sig = mult * (net.bn_gain * xhat + net.bn_bias)
        cache.xhat, cache.inv_std, cache.batch_mean, cache.batch_var = xhat, inv_std, mean, var
    else:
        norms = np.linalg.norm(z2, axis=1, keepdims=True)
        zero = norms[:, 0] == 0
        if np.any(zero):
            warnings.warn(f"{int(zero.sum())} row(s) have zero norm before L2 normalization; "
                          "returning zero signatures for them", DegenerateInput, stacklevel=2)
        safe = np.where(norms == 0, 1.0, norms)
        sig = mult * z2 / safe
        sig[zero] = 0
        cache.row_norm = norms
    return sig, cache


def backward(net: EmbeddingNetwork, cache: ForwardCache, grad_signatures) -> Gradients:
    """Gradients of a scalar loss w.r.t. every parameter and the input, given
    the loss gradient w.r.t. the signatures of a train-mode forward pass."""
    cfg = net.config
    if cache.mode != "train":
        raise StateError("backward needs a cache from a train-mode forward pass")
    if cache.token != (id(net), net.version):
        raise StateError("cache was produced by a different network or parameter version")
    g = np.asarray(grad_signatures, dtype=net.dtype)
    if g.shape != cache.z2.shape:
        raise DimensionError(f"grad_signatures has shape {g.shape}, expected {cache.z2.shape}")
    B = g.shape[0]
    mult = cfg.output_multiplier

    if cfg.normalization == "batch_norm":
        gy = g * mult
        g_gain = np.sum(gy * cache.xhat, axis=0)
        g_bias = np.sum(gy, axis=0)
        gx = gy * net.bn_gain
        g_z2 = (cache.inv_std / B) * (
            B * gx - gx.sum(axis=0) - cache.xhat * np.sum(gx * cache.xhat, axis=0)
        )
    else:
        g_gain = np.zeros_like(net.bn_gain)
        g_bias = np.zeros_like(net.bn_bias)
        r = cache.row_norm
        safe = np.where(r == 0, 1.0, r)
        u = cache.z2 / safe
        g_z2 = (mult / safe) * (g - u * np.sum(u * g, axis=1, keepdims=True))
        g_z2[r[:, 0] == 0] = 0

    g_W2 = g_z2.T @ cache.h
    g_b2 = g_z2.sum(axis=0)
    g_h = g_z2 @ net.W2
    g_z1 = g_h * _activation_grad(cfg.hidden_activation, cache.z1, cache.h)
    g_W1 = g_z1.T @ cache.x
    g_b1 = g_z1.sum(axis=0)
    g_x = g_z1 @ net.W1
    return Gradients(W1=g_W1, b1=g_b1, W2=g_W2, b2=g_b2, bn_gain=g_gain, bn_bias=g_bias, input=g_x)


def _config_bytes(c: NetworkConfig) -> bytes:
    return struct.pack(
        "<5I3d",
        c.input_dim, c.hidden_dim, c.signature_dim,
        ACTIVATIONS.index(c.hidden_activation), NORMALIZATIONS.index(c.normalization),
        c.norm_scale, c.batch_norm_epsilon, c.batch_norm_momentum,
    )


def save_model(net: EmbeddingNetwork, path) -> None:
    """Write the model file. Tensors are stored as float32; a float32 network
    round-trips bit-exactly."""
    with atomic_write(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(_config_bytes(net.config))
        for name in PARAM_NAMES + BUFFER_NAMES:
            fh.write(np.ascontiguousarray(getattr(net, name), dtype="<f4").tobytes())


def load_model(path, expected: NetworkConfig | None = None, dtype=np.float32) -> EmbeddingNetwork:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, what=str(path))
    if r.take(4) != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    version = r.u32()
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    input_dim, hidden_dim, sig_dim, act, norm, scale, eps, mom = r.unpack("<5I3d")
    try:
        config = NetworkConfig(
            input_dim=input_dim, hidden_dim=hidden_dim, signature_dim=sig_dim,
            hidden_activation=ACTIVATIONS[act], normalization=NORMALIZATIONS[norm],
            norm_scale=scale, batch_norm_epsilon=eps, batch_norm_momentum=mom,
        )
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: invalid config block: {exc}") from None
    if expected is not None:
        mismatched = [f.name for f in fields(NetworkConfig)
                      if getattr(expected, f.name) != getattr(config, f.name)]
        if mismatched:
            raise FormatError(f"{path}: config mismatch in {', '.join(mismatched)}")
    shapes = {
        "W1": (hidden_dim, input_dim), "b1": (hidden_dim,),
        "W2": (sig_dim, hidden_dim), "b2": (sig_dim,),
        "bn_gain": (sig_dim,), "bn_bias": (sig_dim,),
        "bn_running_mean": (sig_dim,), "bn_running_var": (sig_dim,),
    }
    tensors = {}
    for name in PARAM_NAMES + BUFFER_NAMES:
        shape = shapes[name]
        n = int(np.prod(shape))
        raw = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = raw.astype(dtype)
    if not r.at_end():
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    try:
        return EmbeddingNetwork(config, **tensors)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def config_dict(config: NetworkConfig) -> dict:
    return asdict(config)
