"""Proprioceptive inverse dynamics model: architecture, pretraining and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_core
from .data import WindowSet, delta_target
from .envsim import ACTION_DIM, PROPRIO_DIM, NoiseConfig
from .nn_core import Adam, ConfigurationError, GradientSet, Mlp, TrainingDivergenceError

log = logging.getLogger(__name__)

MODULES = ("proprio_encoder", "action_encoder", "delta_encoder", "backbone", "decoder")

# Fixed per-channel input scales: angles in rad are left alone, velocities are
# shrunk, and the one-step delta (a few hundredths of a rad) is blown up.
PROPRIO_SCALE = (1.0, 1.0, 0.2, 0.2)
ACTION_SCALE = (1.0, 1.0)
DELTA_SCALE = (10.0, 10.0, 0.5, 0.5)


@dataclass(frozen=True)
class PidmArch:
    k_hist: int = 4
    embed: int = 128
    encoder_hidden: tuple = (128,)
    backbone_hidden: tuple = (512, 256, 128)
    decoder_hidden: tuple = (128,)
    action_range: float = 2.5

    @property
    def backbone_in(self) -> int:
        return (2 * self.k_hist + 1) * self.embed

    def manifest(self) -> dict:
        d = asdict(self)
        d.update(channels={"proprio": PROPRIO_DIM, "action": ACTION_DIM},
                 proprio_scale=list(PROPRIO_SCALE), action_scale=list(ACTION_SCALE),
                 delta_scale=list(DELTA_SCALE))
        return d


def build_encoder(in_dim, arch: PidmArch, rng, hidden=None, dtype=np.float32) -> Mlp:
    hidden = arch.encoder_hidden if hidden is None else hidden
    return Mlp.build([in_dim, *hidden, arch.embed], rng, dtype=dtype)


def build_backbone(arch: PidmArch, rng, dtype=np.float32) -> Mlp:
    return Mlp.build([arch.backbone_in, *arch.backbone_hidden, arch.embed], rng, dtype=dtype)


def encode_history(proprio_encoder: Mlp, action_encoder: Mlp, hist_x, hist_a):
    """Run the shared per-timestep encoders; returns flattened embeddings and caches."""
    b, k = hist_x.shape[:2]
    px = (hist_x * np.asarray(PROPRIO_SCALE)).reshape(b * k, PROPRIO_DIM)
    pa = (hist_a * np.asarray(ACTION_SCALE)).reshape(b * k, ACTION_DIM)
    ex, cx = proprio_encoder.forward(px)
    ea, ca = action_encoder.forward(pa)
    return ex.reshape(b, -1), ea.reshape(b, -1), cx, ca


def encode_history_backward(proprio_encoder, action_encoder, cx, ca, g_ex, g_ea, b, k):
    gx, _ = proprio_encoder.backward(cx, g_ex.reshape(b * k, -1))
    ga, _ = action_encoder.backward(ca, g_ea.reshape(b * k, -1))
    return gx, ga


class Pidm:
    """Inverse dynamics model ``(history, desired delta) -> action``.

    Embeddings enter the backbone as proprio frames oldest to newest, then
    actions oldest to newest, then the delta embedding.
    """

    def __init__(self, modules: dict[str, Mlp], arch: PidmArch = PidmArch()):
        missing = set(MODULES) - set(modules)
        if missing:
            raise ConfigurationError(f"missing PIDM modules {sorted(missing)}")
        if modules["backbone"].in_dim != arch.backbone_in:
            raise ConfigurationError("backbone input does not match (2K+1)*embed")
        self.modules = {name: modules[name] for name in MODULES}
        self.arch = arch

    @classmethod
    def init(cls, arch: PidmArch, rng: np.random.Generator, dtype=np.float32) -> "Pidm":
        mods = {
            "proprio_encoder": build_encoder(PROPRIO_DIM, arch, rng, dtype=dtype),
            "action_encoder": build_encoder(ACTION_DIM, arch, rng, dtype=dtype),
            "delta_encoder": build_encoder(PROPRIO_DIM, arch, rng, dtype=dtype),
            "backbone": build_backbone(arch, rng, dtype=dtype),
            "decoder": Mlp.build([arch.embed, *arch.decoder_hidden, ACTION_DIM], rng,
                                 out_act="sigmoid_renorm", dtype=dtype,
                                 out_range=(-arch.action_range, arch.action_range)),
        }
        return cls(mods, arch)

    def __getattr__(self, name):
        mods = self.__dict__.get("modules")
        if mods is not None and name in mods:
            return mods[name]
        raise AttributeError(name)

    def parameters(self) -> list[np.ndarray]:
        return [p for name in MODULES for p in self.modules[name].parameters()]

    def num_params(self) -> int:
        return sum(m.num_params() for m in self.modules.values())

    def copy(self) -> "Pidm":
        return Pidm({k: m.copy() for k, m in self.modules.items()}, self.arch)

    def forward(self, hist_x, hist_a, delta, keep_cache=True):
        hist_x = np.asarray(hist_x)
        if hist_x.ndim != 3 or hist_x.shape[1] != self.arch.k_hist:
            raise ConfigurationError(f"incomplete window: expected {self.arch.k_hist} frames")
        if np.asarray(hist_a).shape[1] != self.arch.k_hist:
            raise ConfigurationError(f"incomplete window: expected {self.arch.k_hist} actions")
        b, k = hist_x.shape[:2]
        ex, ea, cx, ca = encode_history(self.proprio_encoder, self.action_encoder, hist_x, hist_a)
        ed, cd = self.delta_encoder.forward(np.asarray(delta) * np.asarray(DELTA_SCALE))
        z = np.concatenate([ex, ea, ed], axis=1)
        hb, cb = self.backbone.forward(z)
        out, co = self.decoder.forward(hb)
        cache = (cx, ca, cd, cb, co, b, k) if keep_cache else None
        return out, cache

    def predict(self, hist_x, hist_a, delta, chunk=8192) -> np.ndarray:
        outs = [self.forward(hist_x[i:i + chunk], hist_a[i:i + chunk], delta[i:i + chunk],
                             keep_cache=False)[0]
                for i in range(0, len(hist_x), chunk)]
        return np.concatenate(outs) if outs else np.zeros((0, ACTION_DIM), dtype=np.float32)

    def backward(self, cache, grad_out) -> GradientSet:
        cx, ca, cd, cb, co, b, k = cache
        e = self.arch.embed
        g_dec, g_hb = self.decoder.backward(co, grad_out)
        g_bb, g_z = self.backbone.backward(cb, g_hb)
        g_ex, g_ea, g_ed = g_z[:, :k * e], g_z[:, k * e:2 * k * e], g_z[:, 2 * k * e:]
        g_px, g_pa = encode_history_backward(self.proprio_encoder, self.action_encoder, cx, ca,
                                             g_ex, g_ea, b, k)
        g_de, _ = self.delta_encoder.backward(cd, g_ed)
        return g_px + g_pa + g_de + g_bb + g_dec

    # -- checkpoints
    def save(self, path, extra=None):
        info = {"kind": "pidm", "pidm": self.arch.manifest()}
        info.update(extra or {})
        nn_core.save_modules(path, self.modules, info)

    @classmethod
    def load(cls, path, arch: PidmArch = PidmArch()) -> "Pidm":
        expected = {name: m.spec() for name, m in
                    cls.init(arch, np.random.default_rng(0)).modules.items()}
        modules, manifest = nn_core.load_modules(path, expected)
        check_pidm_manifest(manifest, arch, path)
        return cls(modules, arch)


def check_pidm_manifest(manifest: dict, arch: PidmArch, path="checkpoint"):
    info = manifest.get("extra", {}).get("pidm")
    if info is None:
        raise nn_core.CheckpointIncompatibleError(f"{path}: no PIDM manifest section")
    want = arch.manifest()
    for key in ("k_hist", "embed", "channels", "proprio_scale", "action_scale", "delta_scale"):
        if info.get(key) != want[key]:
            raise nn_core.CheckpointIncompatibleError(
                f"{path}: PIDM {key} is {info.get(key)}, expected {want[key]}")


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    hist_x: np.ndarray
    hist_a: np.ndarray
    delta: np.ndarray
    label: np.ndarray

    def __len__(self):
        return self.label.shape[0]

    def copy(self) -> "Batch":
        return Batch(self.hist_x.copy(), self.hist_a.copy(), self.delta.copy(), self.label.copy())


def batch_from_windows(ws: WindowSet, idx=None) -> Batch:
    if idx is not None:
        ws = ws.subset(idx)
    return Batch(ws.hist_x.astype(np.float32), ws.hist_a.astype(np.float32),
                 delta_target(ws.x, ws.x_next).astype(np.float32), ws.label.astype(np.float32))


def augment_symmetry(batch: Batch, rng: np.random.Generator, split=None) -> Batch:
    """Mirror a random half (``floor(n/2)`` samples) of the batch.

    ``split`` may pass a fixed index set to mirror instead of drawing one.
    """
    n = len(batch)
    if n < 2:
        raise ConfigurationError("symmetry augmentation needs at least 2 samples")
    if split is None:
        split = rng.permutation(n)[: n // 2]
    out = batch.copy()
    # the arm's mirror negates every proprio channel and every action
    out.hist_x[split] = -out.hist_x[split]
    out.hist_a[split] = -out.hist_a[split]
    out.delta[split] = -out.delta[split]
    out.label[split] = -out.label[split]
    return out


def add_noise(batch: Batch, noise: NoiseConfig, rng: np.random.Generator) -> Batch:
    """Rollout-identical uniform noise on the proprio history frames only."""
    bounds = noise.bounds().astype(np.float32)
    if not np.any(bounds > 0):
        return batch
    out = Batch(batch.hist_x + rng.uniform(-1.0, 1.0, size=batch.hist_x.shape).astype(np.float32) * bounds,
                batch.hist_a, batch.delta, batch.label)
    return out


# ------------------------------------------------------------- pretraining

@dataclass
class PretrainConfig:
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 260
    val_fraction: float = 0.2
    symmetry: bool = True
    noise: bool = True


@dataclass
class PretrainResult:
    model: Pidm
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    status: str = "ok"
    message: str = ""


def train_step(model: Pidm, opt: Adam, batch: Batch) -> float:
    pred, cache = model.forward(batch.hist_x, batch.hist_a, batch.delta)
    loss, g = nn_core.l1_loss(pred, batch.label)
    if not math.isfinite(loss):
        raise TrainingDivergenceError("PIDM loss is not finite")
    opt.step(model.backward(cache, g))
    return loss


def train_epochs(model: Pidm, opt: Adam, windows: WindowSet, epochs: int, batch_size: int,
                 rng: np.random.Generator, noise: NoiseConfig | None = None, symmetry=False) -> list:
    """Plain supervised epochs over ``windows``; returns the mean loss per epoch."""
    losses = []
    n = len(windows)
    full = batch_from_windows(windows)
    for _ in range(epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            b = Batch(full.hist_x[idx], full.hist_a[idx], full.delta[idx], full.label[idx])
            if symmetry and len(b) >= 2:
                b = augment_symmetry(b, rng)
            if noise is not None:
                b = add_noise(b, noise, rng)
            total += train_step(model, opt, b) * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
    return losses


def validation_loss(model: Pidm, val: Batch, noise: NoiseConfig | None, seed=12345) -> float:
    # a fixed noise draw keeps the validation signal comparable across epochs
    if noise is not None:
        val = add_noise(val, noise, np.random.default_rng(seed))
    pred = model.predict(val.hist_x, val.hist_a, val.delta)
    return float(np.mean(np.abs(pred - val.label)))


def pretrain(train: WindowSet, val: WindowSet, cfg: PretrainConfig, seed: int,
             noise: NoiseConfig = NoiseConfig(), arch: PidmArch = PidmArch(),
             progress=None) -> PretrainResult:
    """Supervised L1 pretraining with per-batch symmetry and noise augmentation.

    Keeps the parameters of the epoch with the lowest validation L1.
    """
    if len(train) < 10 * cfg.batch_size:
        raise ConfigurationError(
            f"training set has {len(train)} windows, need at least 10x batch size ({10 * cfg.batch_size})")
    if len(val) == 0:
        raise ConfigurationError("empty validation set")
    rng = np.random.default_rng(seed)
    model = Pidm.init(arch, rng)
    opt = nn_core.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    val_batch = batch_from_windows(val)
    res = PretrainResult(model=model.copy())
    best = math.inf
    use_noise = noise if cfg.noise else None
    for epoch in range(cfg.epochs):
        try:
            tl = train_epochs(model, opt, train, 1, cfg.batch_size, rng, use_noise, cfg.symmetry)[0]
        except TrainingDivergenceError as e:
            res.status, res.message = "diverged", str(e)
            log.error("pretraining diverged at epoch %d: %s", epoch, e)
            break
        vl = validation_loss(model, val_batch, use_noise)
        res.train_loss.append(tl)
        res.val_loss.append(vl)
        if vl < best:
            best = vl
            res.best_epoch = epoch
            res.model = model.copy()
        if progress is not None:
            progress(epoch, tl, vl)
    return res


# --------------------------------------------------------------- evaluation

DEFAULT_BINS = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0)


def evaluate(model, windows: WindowSet, bins=DEFAULT_BINS, noise: NoiseConfig | None = NoiseConfig(),
             seed=0, min_count=10) -> list[dict]:
    """Per-joint action errors binned by commanded magnitude ``|a_t - q_t|``.

    ``model`` is a :class:`Pidm` or any callable ``(hist_x, hist_a, delta) -> actions``.
    The normalized error of a bin is ``sum |a_hat - a| / sum |a - q|``, so the
    zero-order reference (predict ``a_hat = q_t``) scores exactly 1.
    """
    if len(windows) == 0:
        raise ConfigurationError("empty evaluation set")
    batch = batch_from_windows(windows)
    if noise is not None:
        batch = add_noise(batch, noise, np.random.default_rng(seed))
    predict = model.predict if isinstance(model, Pidm) else model
    pred = np.asarray(predict(batch.hist_x, batch.hist_a, batch.delta), dtype=np.float64)
    label = windows.label.astype(np.float64)
    q = windows.x[:, :2].astype(np.float64)
    mag = np.abs(label - q).ravel()
    err = np.abs(pred - label).ravel()
    rows = []
    edges = list(bins)
    for lo, hi in zip(edges[:-1], edges[1:]):
        last = hi == edges[-1]
        m = (mag >= lo) & ((mag <= hi) if last else (mag < hi))
        cnt = int(m.sum())
        msum = float(mag[m].sum())
        row = {
            "bin_lo": lo, "bin_hi": hi, "count": cnt,
            "abs_error": float(err[m].mean()) if cnt else float("nan"),
            "normalized_error": float(err[m].sum() / msum) if msum > 0 else float("nan"),
            "zero_order_abs_error": float(mag[m].mean()) if cnt else float("nan"),
            "zero_order_normalized_error": 1.0 if msum > 0 else float("nan"),
            "low_count": cnt < min_count,
        }
        rows.append(row)
    return rows
