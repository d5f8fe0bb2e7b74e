"""Dataset loading and synthesis.

Digital image sets come from IDX files (the classic big-endian ubyte format);
event-camera recordings come from 5-byte address-event files or a JSON-lines
fallback and are binned into fixed-length binary frame stacks. Synthetic
generators (shifted bars, class blobs) let the whole pipeline run without any
external downloads.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .input_box import rng_for

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DigitalDataset:
    images: torch.Tensor        # (N, C, H, W) in [0, 1]
    labels: torch.Tensor        # (N,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image/label count mismatch")

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def kind(self):
        return "digital"


@dataclass
class SpikeDataset:
    spikes: torch.Tensor        # (N, T, C, H, W) binary
    labels: torch.Tensor

    def __post_init__(self):
        if self.spikes.shape[0] != self.labels.shape[0]:
            raise ValueError("spike/label count mismatch")

    def __len__(self):
        return self.spikes.shape[0]

    @property
    def input_shape(self):
        return tuple(self.spikes.shape[2:])

    @property
    def time_steps(self):
        return self.spikes.shape[1]

    @property
    def kind(self):
        return "spike"


def load_idx(images_path, labels_path) -> DigitalDataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise ValueError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">iiii", head)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad IDX magic {magic:#010x}")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise ValueError(f"{images_path}: truncated image data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise ValueError(f"{labels_path}: truncated IDX header")
        magic, lcount = struct.unpack(">ii", head)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad IDX magic {magic:#010x}")
        raw = f.read(lcount)
        if len(raw) != lcount:
            raise ValueError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if count != lcount:
        raise ValueError(f"image count {count} != label count {lcount}")
    return DigitalDataset(torch.from_numpy(images.astype(np.float64) / 255.0),
                          torch.from_numpy(labels.astype(np.int64)))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) in IDX format."""
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


def parse_aer_bytes(raw: bytes):
    """Decode 5-byte address-event records: x byte, y byte, then the high bit
    of the third byte is polarity and the remaining 23 bits (big-endian) are
    the timestamp."""
    if len(raw) % 5 != 0:
        raise ValueError(f"event stream length {len(raw)} is not a multiple of 5")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 5)
    x = rec[:, 0].astype(np.int64)
    y = rec[:, 1].astype(np.int64)
    p = (rec[:, 2] >> 7).astype(np.int64)
    t = ((rec[:, 2].astype(np.int64) & 0x7F) << 16) | \
        (rec[:, 3].astype(np.int64) << 8) | rec[:, 4].astype(np.int64)
    return t, x, y, p


def parse_event_jsonl(path):
    """JSON-lines fallback: one {"t":..., "x":..., "y":..., "p":...} per line."""
    ts, xs, ys, ps = [], [], [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            ev = json.loads(line)
            ts.append(int(ev["t"])); xs.append(int(ev["x"]))
            ys.append(int(ev["y"])); ps.append(int(ev["p"]))
    return (np.asarray(ts, dtype=np.int64), np.asarray(xs, dtype=np.int64),
            np.asarray(ys, dtype=np.int64), np.asarray(ps, dtype=np.int64))


def bin_events(t, x, y, p, tsteps: int = 10, side: int = 34) -> torch.Tensor:
    """OR-reduce events into (tsteps, 2, side, side) binary frames over equal
    duration windows spanning the recording."""
    frames = np.zeros((tsteps, 2, side, side), dtype=np.float64)
    if len(t) == 0:
        return torch.from_numpy(frames)
    if (x >= side).any() or (y >= side).any() or (x < 0).any() or (y < 0).any():
        raise ValueError(f"event coordinates exceed {side}x{side} grid")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("polarity must be 0 or 1")
    t0, t1 = int(t.min()), int(t.max())
    span = max(1, t1 - t0)
    win = np.minimum(((t - t0) * tsteps) // span, tsteps - 1)
    frames[win, p, y, x] = 1.0
    return torch.from_numpy(frames)


def load_nmnist_example(path, tsteps: int = 10, side: int = 34) -> torch.Tensor:
    """One event recording -> (tsteps, 2, side, side) binary frames. Files
    ending in .jsonl use the JSON-lines fallback, anything else is raw AER."""
    if str(path).endswith(".jsonl"):
        t, x, y, p = parse_event_jsonl(path)
    else:
        with open(path, "rb") as f:
            t, x, y, p = parse_aer_bytes(f.read())
    return bin_events(t, x, y, p, tsteps, side)


def load_event_dir(root, tsteps: int = 10, side: int = 34, limit: int = None) -> SpikeDataset:
    """Directory with one subdirectory per class label, each holding event files."""
    import os
    spikes, labels = [], []
    for name in sorted(os.listdir(root)):
        sub = os.path.join(root, name)
        if not os.path.isdir(sub) or not name.isdigit():
            continue
        for fname in sorted(os.listdir(sub)):
            spikes.append(load_nmnist_example(os.path.join(sub, fname), tsteps, side))
            labels.append(int(name))
            if limit and len(spikes) >= limit:
                break
        if limit and len(spikes) >= limit:
            break
    if not spikes:
        raise ValueError(f"no event files found under {root}")
    return SpikeDataset(torch.stack(spikes), torch.tensor(labels, dtype=torch.int64))


def batch_iter(dataset, batch_size: int, seed: int = None, epoch: int = 0):
    """Deterministic shuffled batches; the final partial batch is included.
    seed=None keeps the original order."""
    n = len(dataset)
    if seed is None:
        order = np.arange(n)
    else:
        order = rng_for(seed, epoch).permutation(n)
    xs = dataset.images if dataset.kind == "digital" else dataset.spikes
    for start in range(0, n, batch_size):
        idx = torch.as_tensor(order[start:start + batch_size].copy())
        yield xs[idx], dataset.labels[idx]


def synth_bars(n: int, seed: int, classes: int = 10, height: int = 10,
               width: int = None, noise: float = 0.08) -> DigitalDataset:
    """Images of a bright vertical bar whose column encodes the class."""
    width = width or classes
    if classes > width:
        raise ValueError("need at least one column per class")
    rng = rng_for(seed)
    labels = rng.integers(0, classes, size=n)
    images = np.full((n, 1, height, width), 0.08, dtype=np.float64)
    for i, lbl in enumerate(labels):
        col = int(lbl * width // classes)
        images[i, 0, :, col] = 0.92
    images += rng.uniform(-noise, noise, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return DigitalDataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)))


def synth_blobs(n: int, seed: int, classes: int = 2, dim: int = 16,
                noise: float = 0.08) -> DigitalDataset:
    """Class-template vectors with entries pushed toward 0.1/0.9 plus noise,
    shaped (1, 1, dim) so they flow through the same image pipeline."""
    rng = rng_for(seed)
    templates = np.where(rng.random((classes, dim)) < 0.5, 0.1, 0.9)
    labels = rng.integers(0, classes, size=n)
    images = templates[labels] + rng.uniform(-noise, noise, size=(n, dim))
    np.clip(images, 0.0, 1.0, out=images)
    return DigitalDataset(torch.from_numpy(images.reshape(n, 1, 1, dim)),
                          torch.from_numpy(labels.astype(np.int64)))


def synth_spike_bars(n: int, seed: int, tsteps: int = 6, classes: int = 10,
                     height: int = 10, width: int = None) -> SpikeDataset:
    """Bernoulli-encoded bars: a ready-made binary spike dataset."""
    from .input_box import sample_digital
    digital = synth_bars(n, seed, classes, height, width)
    spikes = torch.stack([sample_digital(digital.images[i], tsteps, seed + 7919 * (i + 1))
                          for i in range(n)])
    return SpikeDataset(spikes, digital.labels)
