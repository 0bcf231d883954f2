"""Transition datasets: the on-disk record format, the append-only buffer and
history-window assembly for inverse-dynamics training."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .envsim import ACTION_DIM, PROPRIO_CHANNELS, PROPRIO_DIM, ArmConfig, wrap_angle

DATASET_VERSION = 1
RECORD_CHANNELS = (
    [f"x_{c}" for c in PROPRIO_CHANNELS]
    + [f"a_{i + 1}" for i in range(ACTION_DIM)]
    + [f"xnext_{c}" for c in PROPRIO_CHANNELS]
    + ["done", "episode_id", "env_id"]
)
RECORD_DIM = len(RECORD_CHANNELS)
_X = slice(0, 4)
_A = slice(4, 6)
_XN = slice(6, 10)
_DONE, _EP, _ENV = 10, 11, 12


class DatasetFormatError(ValueError):
    pass


class TransitionBuffer:
    """Append-only store of noise-free transitions in collection order."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self._size = 0
        self._cached = None

    def __len__(self):
        return self._size

    def append(self, x, action, x_next, done, episode_id, env_id):
        x = np.atleast_2d(x)
        n = x.shape[0]
        rec = np.empty((n, RECORD_DIM), dtype=np.float32)
        rec[:, _X] = x
        rec[:, _A] = np.atleast_2d(action)
        rec[:, _XN] = np.atleast_2d(x_next)
        rec[:, _DONE] = np.asarray(done, dtype=np.float32).reshape(n)
        rec[:, _EP] = np.asarray(episode_id).reshape(n)
        rec[:, _ENV] = np.asarray(env_id).reshape(n)
        self._chunks.append(rec)
        self._size += n
        self._cached = None

    def records(self) -> np.ndarray:
        if self._cached is None:
            self._cached = (np.concatenate(self._chunks) if self._chunks
                            else np.zeros((0, RECORD_DIM), dtype=np.float32))
            self._chunks = [self._cached]
        return self._cached


def write_dataset(path, records: np.ndarray, arm: ArmConfig, k_hist: int, source="exploration",
                  extra: dict | None = None):
    records = np.ascontiguousarray(records, dtype="<f4")
    if records.ndim != 2 or records.shape[1] != RECORD_DIM:
        raise DatasetFormatError(f"records must be (n, {RECORD_DIM})")
    manifest = {
        "format_version": DATASET_VERSION,
        "embodiment": asdict(arm),
        "channels": RECORD_CHANNELS,
        "proprio_channels": list(PROPRIO_CHANNELS),
        "k_hist": k_hist,
        "count": int(records.shape[0]),
        "source": source,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        f.write(records.tobytes())


def read_dataset(path):
    """Return ``(records, manifest)``; validates channel layout and record count."""
    with open(path, "rb") as f:
        line = f.readline()
        blob = f.read()
    try:
        manifest = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: unreadable manifest ({e})") from None
    if manifest.get("format_version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {manifest.get('format_version')}")
    if manifest.get("channels") != RECORD_CHANNELS:
        raise DatasetFormatError(f"{path}: channel layout {manifest.get('channels')} does not match "
                                 f"{RECORD_CHANNELS}")
    records = np.frombuffer(blob, dtype="<f4")
    if records.size != manifest["count"] * RECORD_DIM:
        raise DatasetFormatError(f"{path}: blob holds {records.size} floats, manifest says "
                                 f"{manifest['count']} records")
    return records.reshape(-1, RECORD_DIM).astype(np.float32), manifest


# --------------------------------------------------------------------- windows

@dataclass
class WindowSet:
    """History windows with noise-free frames.

    ``hist_x[:, i]`` is ``x_{t-K+1+i}`` and ``hist_a[:, i]`` is ``a_{t-K+i}``;
    ``x`` / ``x_next`` are the noise-free ``x_t`` / ``x_{t+1}`` and ``label`` is ``a_t``.
    """

    hist_x: np.ndarray
    hist_a: np.ndarray
    x: np.ndarray
    x_next: np.ndarray
    label: np.ndarray
    episode: np.ndarray

    def __len__(self):
        return self.label.shape[0]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.hist_x[idx], self.hist_a[idx], self.x[idx], self.x_next[idx],
                         self.label[idx], self.episode[idx])

    @classmethod
    def concat(cls, sets) -> "WindowSet":
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in cls.__dataclass_fields__))

    @property
    def k_hist(self) -> int:
        return self.hist_x.shape[1]


def delta_target(x, x_next) -> np.ndarray:
    """``x_next - x`` with angle channels wrapped to (-pi, pi]."""
    x = np.asarray(x, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    d = x_next - x
    d[..., :2] = wrap_angle(d[..., :2])
    return d


def build_windows(records: np.ndarray, k_hist: int = 4):
    """Assemble all complete windows from records in collection order.

    The first ``k_hist`` steps of every episode have no complete action
    history and are skipped as targets. Returns ``(WindowSet, skipped)``.
    """
    records = np.asarray(records)
    n = records.shape[0]
    if n == 0:
        empty = np.zeros((0,), dtype=np.float32)
        return WindowSet(np.zeros((0, k_hist, PROPRIO_DIM), np.float32),
                         np.zeros((0, k_hist, ACTION_DIM), np.float32),
                         np.zeros((0, PROPRIO_DIM), np.float32), np.zeros((0, PROPRIO_DIM), np.float32),
                         np.zeros((0, ACTION_DIM), np.float32), empty), 0
    ep = records[:, _EP].astype(np.int64)
    order = np.argsort(ep, kind="stable")
    rec = records[order]
    ep_sorted = ep[order]
    start = np.r_[True, ep_sorted[1:] != ep_sorted[:-1]]
    run_start = np.maximum.accumulate(np.where(start, np.arange(n), 0))
    pos = np.arange(n) - run_start
    targets = np.flatnonzero(pos >= k_hist)
    offs_x = np.arange(-k_hist + 1, 1)
    offs_a = np.arange(-k_hist, 0)
    hist_x = rec[targets[:, None] + offs_x[None, :], _X]
    hist_a = rec[targets[:, None] + offs_a[None, :], _A]
    ws = WindowSet(hist_x, hist_a, rec[targets, _X], rec[targets, _XN], rec[targets, _A],
                   ep_sorted[targets])
    return ws, int(n - targets.size)


def make_training_pair(window: WindowSet, i: int):
    """Inputs ``(hist_x, hist_a, delta)`` and the uncorrupted label for window ``i``."""
    return ((window.hist_x[i], window.hist_a[i], delta_target(window.x[i], window.x_next[i])),
            window.label[i])


def split_by_episode(windows: WindowSet, val_fraction: float, rng: np.random.Generator):
    """Disjoint train/validation split with every episode wholly on one side."""
    eps = np.unique(windows.episode)
    perm = rng.permutation(eps)
    n_val = int(round(val_fraction * eps.size))
    val_eps = perm[:n_val]
    is_val = np.isin(windows.episode, val_eps)
    return windows.subset(np.flatnonzero(~is_val)), windows.subset(np.flatnonzero(is_val))
