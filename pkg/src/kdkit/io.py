"""Persistence formats, configuration, and the synthetic dataset.

Binary tensor container: magic "LTKD", 1 version byte, 1 dtype byte
(0=f32, 1=f64, 2=u8, 3=i64), 1 rank byte, little-endian u32 dims, row-major
little-endian payload. Bundles are directories holding one concatenated
container file plus a plain-text manifest (name, dtype, shape, offset, crc32)
and a JSON metadata file. All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import configparser
import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"LTKD"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "u1": 2, "i8": 3}


class FormatError(ValueError):
    """Malformed or inconsistent persisted artifact."""


def _dtype_code(arr: np.ndarray) -> int:
    key = f"{arr.dtype.kind if arr.dtype.kind != 'f' else 'f'}{arr.dtype.itemsize}"
    key = {"f4": "f4", "f8": "f8", "u1": "u1", "i8": "i8"}.get(key)
    if key is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return _CODE_FOR_KIND[key]


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    shape = arr.shape
    arr = np.ascontiguousarray(arr).reshape(shape)  # ascontiguousarray promotes 0-d to (1,)
    code = _dtype_code(arr)
    if arr.ndim > 255:
        raise FormatError("rank exceeds container limit")
    header = MAGIC + struct.pack("<BBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad magic bytes")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 7
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return arr.copy(), pos + nbytes


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _dtype_name(arr: np.ndarray) -> str:
    return {0: "f32", 1: "f64", 2: "u8", 3: "i64"}[_dtype_code(arr)]


def save_bundle(path: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Persist named tensors + metadata as a bundle directory."""
    os.makedirs(path, exist_ok=True)
    blob = bytearray()
    lines = []
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise FormatError(f"tensor name {name!r} contains whitespace")
        offset = len(blob)
        chunk = tensor_to_bytes(np.asarray(arr))
        blob += chunk
        shape = "x".join(str(s) for s in np.asarray(arr).shape) or "scalar"
        crc = zlib.crc32(chunk)
        lines.append(f"{name} {_dtype_name(np.asarray(arr))} {shape} {offset} {crc}")
    _atomic_write(os.path.join(path, "tensors.bin"), bytes(blob))
    _atomic_write(os.path.join(path, "manifest.txt"), ("\n".join(lines) + "\n").encode())
    _atomic_write(os.path.join(path, "meta.json"),
                  json.dumps(meta or {}, sort_keys=True, indent=1).encode())


def load_bundle(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Load a bundle; every tensor is CRC-validated against the manifest."""
    with open(os.path.join(path, "manifest.txt"), "rb") as f:
        manifest = f.read().decode().splitlines()
    with open(os.path.join(path, "tensors.bin"), "rb") as f:
        blob = f.read()
    with open(os.path.join(path, "meta.json"), "rb") as f:
        meta = json.loads(f.read().decode())
    tensors: dict[str, np.ndarray] = {}
    for line in manifest:
        if not line.strip():
            continue
        name, _dtype, _shape, offset, crc = line.rsplit(" ", 4)
        arr, end = tensor_from_bytes(blob, int(offset))
        if zlib.crc32(blob[int(offset):end]) != int(crc):
            raise FormatError(f"checksum mismatch for tensor {name!r}")
        tensors[name] = arr
    return tensors, meta


# ---------------------------------------------------------------------------
# experiment configuration


_SCHEMA: dict[str, dict[str, tuple]] = {
    # section -> key -> (parser, default)
    "data": {
        "path": (str, "runs/data"),
        "classes": (int, 10),
        "train": (int, 5000),
        "test": (int, 1000),
        "size": (int, 32),
        "motif": (int, 12),
        "flip": (lambda s: s.lower() in ("1", "true", "yes"), True),
    },
    "teacher": {
        "arch": (str, "cnn8"),
        "checkpoint": (str, "runs/teacher"),
    },
    "student": {
        "arch": (str, "cnn4"),
    },
    "kd": {
        "variant": (str, "baseline"),
        "k_penult": (int, 64),
        "k_inter": (int, 8),
        "alpha_penult": (float, 1.0),
        "alpha_inter": (float, 1.0),
        "label_temperature": (float, 1.0),
        "table_temperature": (float, 0.0),   # 0 disables row smoothing
        "pred_temperature": (float, 1.0),
        "assignment": (str, "bn_relu"),
        "labeler_source": (str, "kmeans"),
        "labelers": (str, "runs/labelers"),
        "logit_temperature": (float, 4.0),
        "logit_weight": (float, 0.9),
    },
    "train": {
        "epochs": (int, 60),
        "lr": (float, 0.05),
        "decay_epochs": (lambda s: [int(x) for x in s.split(",") if x.strip()], [35, 45, 55]),
        "decay_factor": (float, 0.1),
        "momentum": (float, 0.9),
        "nesterov": (lambda s: s.lower() in ("1", "true", "yes"), True),
        "weight_decay": (float, 5e-4),
        "batch_size": (int, 64),
        "dtype": (str, "f64"),
    },
    "io": {
        "out": (str, "runs/out"),
        "seed": (int, 0),
        "record_timing": (lambda s: s.lower() in ("1", "true", "yes"), False),
    },
}

VARIANTS = ("baseline", "logit-kd", "match-loss", "kd-penult", "kd-both")


@dataclass
class ExperimentConfig:
    sections: dict[str, dict]

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({s: {k: v[1] for k, v in keys.items()} for s, keys in _SCHEMA.items()})


def parse_config(path: str) -> ExperimentConfig:
    """Parse a sectioned key-value file, rejecting unknown sections/keys."""
    cp = configparser.ConfigParser()
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cp.read(path)
    cfg = ExperimentConfig.defaults()
    for section in cp.sections():
        if section not in _SCHEMA:
            raise FormatError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise FormatError(f"unknown config key [{section}] {key}")
            parser = _SCHEMA[section][key][0]
            cfg.sections[section][key] = parser(raw)
    variant = cfg["kd"]["variant"]
    if variant not in VARIANTS:
        raise FormatError(f"unknown variant {variant!r}; choices: {VARIANTS}")
    if cfg["train"]["dtype"] not in ("f32", "f64"):
        raise FormatError("train dtype must be f32 or f64")
    return cfg


def np_dtype(name: str):
    return np.float32 if name == "f32" else np.float64


# ---------------------------------------------------------------------------
# synthetic dataset


def generate_pattern_blobs(path: str, classes: int = 10, train: int = 5000,
                           test: int = 1000, seed: int = 0, size: int = 32,
                           motif: int = 12, noise: float = 0.35,
                           distractor: float = 0.70, n_distractors: int = 2) -> None:
    """Localized class motifs on noise, written as image/label bundles.

    Each class owns a smoothed random motif; every image carries its class
    motif at a random position plus near-full-strength distractor motifs from
    other classes, making local evidence ambiguous.
    """
    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(classes):
        field = rng.standard_normal((motif + 8, motif + 8, 3))
        # cheap smoothing: two box-blur passes
        for _ in range(2):
            field = (field + np.roll(field, 1, 0) + np.roll(field, -1, 0)
                     + np.roll(field, 1, 1) + np.roll(field, -1, 1)) / 5.0
        t = field[4:4 + motif, 4:4 + motif]
        t = t / np.abs(t).max()
        templates.append(t)

    def make_split(count: int):
        images = np.zeros((count, size, size, 3), dtype=np.float64)
        labels = rng.integers(classes, size=count).astype(np.int64)
        for i in range(count):
            img = rng.standard_normal((size, size, 3)) * noise
            c = int(labels[i])
            amp = rng.uniform(0.8, 1.2)
            yy = int(rng.integers(size - motif))
            xx = int(rng.integers(size - motif))
            img[yy:yy + motif, xx:xx + motif] += amp * templates[c]
            for _ in range(n_distractors):
                other = int((c + 1 + rng.integers(classes - 1)) % classes)
                damp = distractor * rng.uniform(0.8, 1.2)
                yy = int(rng.integers(size - motif))
                xx = int(rng.integers(size - motif))
                img[yy:yy + motif, xx:xx + motif] += damp * templates[other]
            images[i] = img
        u8 = np.clip((img_norm(images) + 1.0) * 127.5, 0, 255).astype(np.uint8)
        return u8, labels

    train_images, train_labels = make_split(train)
    test_images, test_labels = make_split(test)
    flat = train_images.reshape(-1, 3).astype(np.float64) / 255.0
    meta = {
        "classes": classes,
        "train": train,
        "test": test,
        "seed": seed,
        "norm_mean": [float(m) for m in flat.mean(axis=0)],
        "norm_std": [float(s) for s in flat.std(axis=0)],
    }
    save_bundle(path, {
        "train_images": train_images,
        "train_labels": train_labels,
        "test_images": test_images,
        "test_labels": test_labels,
    }, meta)


def img_norm(images: np.ndarray) -> np.ndarray:
    return np.clip(images, -2.5, 2.5) / 2.5


@dataclass
class Dataset:
    train_images: np.ndarray   # (N, h, w, 3) u8
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    classes: int
    mean: np.ndarray           # per-channel, train-split statistics
    std: np.ndarray

    def normalize(self, u8: np.ndarray, dtype=np.float64) -> np.ndarray:
        x = u8.astype(dtype) / dtype(255.0)
        return ((x - self.mean.astype(dtype)) / self.std.astype(dtype)).astype(dtype)


def load_dataset(path: str) -> Dataset:
    tensors, meta = load_bundle(path)
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if key not in tensors:
            raise FormatError(f"dataset bundle missing {key!r}")
    classes = int(meta["classes"])
    for split in ("train", "test"):
        imgs, labels = tensors[f"{split}_images"], tensors[f"{split}_labels"]
        if imgs.shape[0] != labels.shape[0]:
            raise FormatError(f"{split}: image/label count mismatch")
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise FormatError(f"{split}: label out of range")
    return Dataset(
        train_images=tensors["train_images"],
        train_labels=tensors["train_labels"],
        test_images=tensors["test_images"],
        test_labels=tensors["test_labels"],
        classes=classes,
        mean=np.asarray(meta["norm_mean"], dtype=np.float64),
        std=np.asarray(meta["norm_std"], dtype=np.float64),
    )


def flip_mask(seed: int, epoch: int, indices: np.ndarray) -> np.ndarray:
    """Deterministic horizontal-flip decisions keyed to (seed, epoch, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x0F11]))
    coins = rng.random(1 << 20)
    return coins[indices % (1 << 20)] < 0.5


# ---------------------------------------------------------------------------
# metrics


METRICS_HEADER = "epoch,split,loss_ce,loss_kd_penult,loss_kd_inter,top1,wall_seconds"


class MetricsWriter:
    """Append-safe comma-separated metrics, flushed on every row."""

    def __init__(self, path: str):
        self.path = path
        self._last_epoch: dict[str, int] = {}
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a")
        if fresh:
            self._fh.write(METRICS_HEADER + "\n")
            self._fh.flush()

    def write(self, epoch: int, split: str, loss_ce: float, loss_kd_penult: float,
              loss_kd_inter: float, top1: float, wall_seconds: float) -> None:
        values = [loss_ce, loss_kd_penult, loss_kd_inter, top1, wall_seconds]
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"metrics: non-finite value at epoch {epoch} ({split})")
        if split in self._last_epoch and epoch <= self._last_epoch[split]:
            raise ValueError(f"metrics: epochs must be strictly increasing per split ({split})")
        self._last_epoch[split] = epoch
        row = (f"{epoch},{split},{loss_ce:.6f},{loss_kd_penult:.6f},"
               f"{loss_kd_inter:.6f},{top1:.6f},{wall_seconds:.3f}")
        self._fh.write(row + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
