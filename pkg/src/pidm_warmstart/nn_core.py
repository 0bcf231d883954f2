"""Dense MLP engine with hand-written backprop, Adam/AdamW, L1 loss and checkpoints.

Networks hold their parameters as plain numpy arrays which optimizers update in
place. Batched inputs are row-major: ``(batch, features)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
ACTIVATIONS = ("elu", "identity", "sigmoid_renorm")


class ConfigurationError(ValueError):
    """Shapes, dimensions or arguments do not fit together."""


class TrainingDivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""


class CheckpointIncompatibleError(ValueError):
    """A checkpoint's manifest does not match the requested architecture."""


# ---------------------------------------------------------------- activations

def elu(z):
    out = np.asarray(np.minimum(z, 0))
    if out.ndim == 0:
        return np.expm1(out) + np.maximum(z, 0)
    np.expm1(out, out=out)
    out += np.maximum(z, 0)
    return out


def _act_forward(tag, z, out_range):
    if tag == "elu":
        return elu(z)
    if tag == "identity":
        return z
    lo, hi = out_range
    # tanh form of the logistic function, stable for large |z|
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return lo + (hi - lo) * s


def _act_backward(tag, z, y, grad, out_range):
    if tag == "elu":
        # dELU/dz is 1 above zero and y + 1 below, i.e. min(y + 1, 1) everywhere
        d = y + 1
        np.minimum(d, 1, out=d)
        d *= grad
        return d
    if tag == "identity":
        return grad
    lo, hi = out_range
    s = (y - lo) / (hi - lo)
    return grad * ((hi - lo) * s * (1.0 - s))


# ---------------------------------------------------------------------- layers

@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Cache:
    """Activation record of one forward pass, consumed by :meth:`Mlp.backward`."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


class Mlp:
    """Stack of dense layers, each followed by its own activation."""

    def __init__(self, layers: Sequence[Linear], out_range=(-2.5, 2.5)):
        if not layers:
            raise ConfigurationError("an Mlp needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {layer.activation!r}")
            if layer.activation == "sigmoid_renorm" and i != len(layers) - 1:
                raise ConfigurationError("sigmoid_renorm is only allowed on the final layer")
            if layer.bias.shape != (layer.out_dim,):
                raise ConfigurationError("bias shape does not match weight rows")
        self.layers = list(layers)
        self.out_range = (float(out_range[0]), float(out_range[1]))

    @classmethod
    def build(cls, dims: Sequence[int], rng: np.random.Generator, hidden_act="elu",
              out_act="identity", out_scale=1.0, dtype=np.float32, out_range=(-2.5, 2.5)):
        """He fan-in initialised MLP with layer sizes ``dims`` (input first)."""
        if len(dims) < 2:
            raise ConfigurationError("need at least input and output dims")
        layers = []
        n = len(dims) - 1
        for i in range(n):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            if i == n - 1:
                w = w * out_scale
            act = out_act if i == n - 1 else hidden_act
            layers.append(Linear(w.astype(dtype), np.zeros(fan_out, dtype=dtype), act))
        return cls(layers, out_range=out_range)

    # -- introspection
    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return Mlp([Linear(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
                   out_range=self.out_range)

    def spec(self) -> dict:
        return {"dims": self.dims(), "activations": self.activations(),
                "out_range": list(self.out_range)}

    # -- compute
    def forward(self, x: np.ndarray, keep_cache=True):
        x = np.asarray(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"input has {x.shape[-1]} features, expected {self.in_dim}")
        x = x.astype(self.dtype, copy=False)
        cache = Cache() if keep_cache else None
        h = x
        for layer in self.layers:
            z = h @ layer.weight.T + layer.bias
            y = _act_forward(layer.activation, z, self.out_range)
            if keep_cache:
                cache.inputs.append(h)
                cache.pre.append(z)
                cache.post.append(y)
            h = y
        if squeeze:
            h = h[0]
        return h, cache

    def __call__(self, x):
        return self.forward(x, keep_cache=False)[0]

    def backward(self, cache: Cache, output_grad: np.ndarray):
        """Return ``(grads, input_grad)`` for the loss whose output gradient is given.

        ``grads`` is a :class:`GradientSet` ordered like :meth:`parameters`.
        """
        if cache is None or len(cache.inputs) != len(self.layers):
            raise ConfigurationError("cache does not belong to this network")
        g = np.asarray(output_grad, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != cache.post[-1].shape:
            raise ConfigurationError(
                f"output grad shape {g.shape} does not match cached output {cache.post[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            gz = _act_backward(layer.activation, cache.pre[i], cache.post[i], g, self.out_range)
            grads[2 * i] = gz.T @ cache.inputs[i]
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ layer.weight
        if np.asarray(output_grad).ndim == 1:
            g = g[0]
        return GradientSet(grads), g


# ------------------------------------------------------------------- gradients

class GradientSet:
    """One gradient array per parameter array, with a cached global L2 norm."""

    def __init__(self, arrays: Iterable[np.ndarray]):
        self.arrays = list(arrays)
        self._norm = None

    def __len__(self):
        return len(self.arrays)

    def __iter__(self):
        return iter(self.arrays)

    def __getitem__(self, i):
        return self.arrays[i]

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(list(self.arrays) + list(other.arrays))

    @property
    def global_norm(self) -> float:
        if self._norm is None:
            self._norm = math.sqrt(sum(float(np.vdot(a, a)) for a in self.arrays))
        return self._norm

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet([a * np.asarray(factor, dtype=a.dtype) for a in self.arrays])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "GradientSet":
        return cls([np.zeros_like(p) for p in params])


def clip_grad_norm(grads: GradientSet, g_max: float) -> GradientSet:
    """Scale ``grads`` by ``min(1, g_max / ||grads||)``."""
    if g_max <= 0:
        raise ConfigurationError("g_max must be positive")
    norm = grads.global_norm
    if norm <= g_max or norm == 0.0:
        return grads
    return grads.scaled(g_max / norm)


# ------------------------------------------------------------------ optimizers

class Adam:
    """Adam, or AdamW when ``decoupled`` is set (decay applied as ``p -= lr*wd*p``).

    The learning rate is a plain attribute so callers can adapt it between steps.
    """

    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decoupled=False):
        if lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.decoupled = decoupled
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    @property
    def kind(self) -> str:
        return "adamw" if self.decoupled else "adam"

    def step(self, grads: GradientSet | Sequence[np.ndarray]):
        arrays = grads.arrays if isinstance(grads, GradientSet) else list(grads)
        if len(arrays) != len(self.params):
            raise ConfigurationError("gradient count does not match parameter count")
        for p, g in zip(self.params, arrays):
            if p.shape != g.shape:
                raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            # a sum is finite only if every entry is (barring float overflow, itself a divergence)
            if not np.isfinite(np.sum(g)):
                raise TrainingDivergenceError(
                    f"non-finite gradient (shape {g.shape}, max |g| {np.nanmax(np.abs(g))})")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        lr_t = self.lr / c1
        for p, g, m, v in zip(self.params, arrays, self.m, self.v):
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            if self.weight_decay and self.decoupled:
                p *= p.dtype.type(1.0 - self.lr * self.weight_decay)
            den = v / c2
            np.sqrt(den, out=den)
            den += self.eps
            np.divide(m, den, out=den)
            den *= lr_t
            p -= den


def AdamW(params, lr=1e-3, weight_decay=1e-2, **kw) -> Adam:
    return Adam(params, lr=lr, weight_decay=weight_decay, decoupled=True, **kw)


# ---------------------------------------------------------------------- losses

def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its gradient w.r.t. ``pred`` (subgradient 0 at 0)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.size == 0:
        raise ConfigurationError("l1_loss of empty arrays")
    if pred.shape != target.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.abs(diff)))
    grad = (np.sign(diff) / diff.size).astype(pred.dtype, copy=False)
    return loss, grad


# ------------------------------------------------------------------ checkpoint

def save_modules(path, modules: dict[str, Mlp], extra: dict | None = None):
    """Write named MLPs as one JSON manifest line followed by a little-endian f32 blob."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f4",
        "modules": {name: net.spec() for name, net in modules.items()},
        "order": list(modules),
        "extra": extra or {},
    }
    blobs = []
    for name in modules:
        for p in modules[name].parameters():
            blobs.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for b in blobs:
            f.write(b)


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        line = f.readline()
    try:
        manifest = json.loads(line)
    except json.JSONDecodeError as e:
        raise CheckpointIncompatibleError(f"{path}: not a checkpoint ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointIncompatibleError(
            f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest


def load_modules(path, expected: dict[str, dict] | None = None):
    """Read a checkpoint written by :func:`save_modules`.

    Returns ``(modules, manifest)``. If ``expected`` maps module names to
    :meth:`Mlp.spec` dicts, every listed module must match exactly.
    """
    with open(path, "rb") as f:
        line = f.readline()
        blob = f.read()
    manifest = json.loads(line)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointIncompatibleError(
            f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    if expected is not None:
        for name, spec in expected.items():
            got = manifest["modules"].get(name)
            if got is None:
                raise CheckpointIncompatibleError(f"{path}: missing module {name!r}")
            if got["dims"] != list(spec["dims"]) or got["activations"] != list(spec["activations"]):
                raise CheckpointIncompatibleError(
                    f"{path}: module {name!r} is {got['dims']}/{got['activations']}, "
                    f"expected {list(spec['dims'])}/{list(spec['activations'])}")
    flat = np.frombuffer(blob, dtype="<f4")
    need = sum(d_out * (d_in + 1) for name in manifest["order"]
               for d_in, d_out in zip(manifest["modules"][name]["dims"][:-1],
                                      manifest["modules"][name]["dims"][1:]))
    if need != flat.size:
        raise CheckpointIncompatibleError(f"{path}: blob holds {flat.size} floats, manifest needs {need}")
    modules = {}
    offset = 0
    for name in manifest["order"]:
        spec = manifest["modules"][name]
        dims, acts = spec["dims"], spec["activations"]
        layers = []
        for i, act in enumerate(acts):
            n_w = dims[i + 1] * dims[i]
            w = flat[offset:offset + n_w].reshape(dims[i + 1], dims[i]).astype(np.float32)
            offset += n_w
            b = flat[offset:offset + dims[i + 1]].astype(np.float32)
            offset += dims[i + 1]
            layers.append(Linear(w, b, act))
        modules[name] = Mlp(layers, out_range=tuple(spec.get("out_range", (-2.5, 2.5))))
    if offset != flat.size:
        raise CheckpointIncompatibleError(f"{path}: blob size does not match manifest")
    return modules, manifest


def save_params(net: Mlp, path, extra=None):
    save_modules(path, {"net": net}, extra)


def load_params(path, like: Mlp | None = None) -> Mlp:
    expected = {"net": like.spec()} if like is not None else None
    modules, _ = load_modules(path, expected)
    if "net" not in modules:
        raise CheckpointIncompatibleError(f"{path}: no single-network entry")
    return modules["net"]


# --------------------------------------------------------------- update sizes

def param_delta(before: Mlp, after: Mlp) -> list[float]:
    """Mean absolute change over all weights and biases, one value per layer."""
    if before.dims() != after.dims():
        raise ConfigurationError("param_delta needs identical architectures")
    out = []
    for lb, la in zip(before.layers, after.layers):
        total = np.abs(la.weight.astype(np.float64) - lb.weight).sum() + \
            np.abs(la.bias.astype(np.float64) - lb.bias).sum()
        out.append(float(total / (lb.weight.size + lb.bias.size)))
    return out


def submodule_delta(before: dict[str, Mlp], after: dict[str, Mlp]) -> dict[str, float]:
    """Per-submodule mean of the per-layer deltas from :func:`param_delta`."""
    if set(before) != set(after):
        raise ConfigurationError("submodule sets differ")
    return {name: float(np.mean(param_delta(before[name], after[name]))) for name in before}
