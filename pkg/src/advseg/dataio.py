"""Synthetic brain phantoms, the SEGV/SEGP binary containers, and fold splits."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .labels import BG, GM, B, WM, L, CSF, V, C, BS, N_LABELS, ROI_IDS

DATASET_MAGIC = b"SEGV"
PARAMS_MAGIC = b"SEGP"
FORMAT_VERSION = 1

_DATASET_HEADER = struct.Struct("<4sHIBHH")
_PARAMS_HEADER = struct.Struct("<4sHI")


class FormatError(Exception):
    pass


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def presence_from_labels(labels: np.ndarray) -> np.ndarray:
    """Boolean vector over the 8 ROIs: does each occupy at least one pixel."""
    counts = np.bincount(np.asarray(labels).ravel().astype(np.intp), minlength=N_LABELS)
    return counts[list(ROI_IDS)] > 0


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [H, W] uint8
    presence: np.ndarray = field(init=False)

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.image.ndim != 3 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")
        self.presence = presence_from_labels(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


# ---------------------------------------------------------------------------
# phantom generation

# Per-channel intensity level (0..8) of each label.  Channel 0 is the identity
# ordering; channels 1 and 2 use the permutations i -> 4i mod 9 and 2i mod 9, so
# any two labels differ by at least three levels in some channel.
CHANNEL_LEVELS = np.array(
    [[i for i in range(N_LABELS)],
     [(4 * i) % N_LABELS for i in range(N_LABELS)],
     [(2 * i) % N_LABELS for i in range(N_LABELS)]],
    dtype=np.int64,
)
LEVEL_LO, LEVEL_STEP = 0.1, 0.1


def class_means() -> np.ndarray:
    """[3, 9] noise-free intensity of every label in every channel."""
    return LEVEL_LO + LEVEL_STEP * CHANNEL_LEVELS


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 42
    size: int = 64
    n_samples: int = 200
    noise_sigma: float = 0.05
    lesion_probability: float = 0.3
    ventricle_probability: float = 0.85
    cerebellum_probability: float = 0.5
    brainstem_probability: float = 0.5
    ventricle_axes: tuple[float, float] = (3.0, 6.0)
    basal_ganglia_radius: tuple[float, float] = (2.5, 4.0)
    lesion_radius: tuple[float, float] = (2.4, 3.6)

    def __post_init__(self):
        if self.size < 32 or self.size % 4:
            raise ValueError("phantom size must be a multiple of 4 and at least 32")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")


def _ellipse(yy, xx, cy, cx, ay, ax, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dy + s * dx) / ay
    v = (-s * dy + c * dx) / ax
    return u * u + v * v


_FOUR = ndimage.generate_binary_structure(2, 1)


def _phantom_labels(rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    n = cfg.size
    scale = n / 64.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n / 2 + rng.uniform(-2, 2) * scale
    cx = n / 2 + rng.uniform(-2, 2) * scale
    ay = rng.uniform(25, 28) * scale
    ax = rng.uniform(21, 25) * scale
    theta = rng.uniform(-0.15, 0.15)
    r = np.sqrt(_ellipse(yy, xx, cy, cx, ay, ax, theta))

    labels = np.full((n, n), BG, dtype=np.uint8)
    csf_in = rng.uniform(0.84, 0.88)
    gm_in = csf_in - rng.uniform(0.13, 0.17)
    labels[r <= 1.0] = CSF
    labels[r <= csf_in] = GM
    labels[r <= gm_in] = WM

    # lower-region structures: cerebellum then brain stem, both inside the CSF rim
    inner = r <= csf_in
    if rng.random() < cfg.cerebellum_probability:
        cb = _ellipse(yy, xx, cy + 0.62 * ay, cx + rng.uniform(-2, 2) * scale,
                      0.26 * ay, 0.55 * ax, theta) <= 1.0
        labels[cb & inner] = C
    if rng.random() < cfg.brainstem_probability:
        bs = _ellipse(yy, xx, cy + 0.45 * ay, cx, 0.22 * ay, 0.14 * ax, theta) <= 1.0
        labels[bs & inner] = BS

    # interior structures may only occupy white matter whose 4-neighbours are all white matter
    core = ndimage.binary_erosion(labels == WM, structure=_FOUR)
    if rng.random() < cfg.ventricle_probability:
        n_vent = int(rng.integers(1, 3))
        offsets = [0.0] if n_vent == 1 else [-1.0, 1.0]
        for off in offsets:
            vy = cy - rng.uniform(2, 5) * scale
            vx = cx + off * rng.uniform(3, 4.5) * scale
            va = rng.uniform(*cfg.ventricle_axes) * scale
            vb = rng.uniform(2.0, 3.5) * scale
            m = _ellipse(yy, xx, vy, vx, va, vb, theta + off * rng.uniform(0.1, 0.4)) <= 1.0
            labels[m & core] = V
    n_bg = int(rng.integers(0, 3))
    sides = rng.permutation([-1.0, 1.0])[:n_bg]
    for side in sides:
        rad = rng.uniform(*cfg.basal_ganglia_radius) * scale
        by = cy + rng.uniform(-3, 3) * scale
        bx = cx + side * rng.uniform(9, 12) * scale
        m = _ellipse(yy, xx, by, bx, rad, rad * rng.uniform(0.7, 1.0)) <= 1.0
        labels[m & core & (labels == WM)] = B
    if rng.random() < cfg.lesion_probability:
        for _ in range(int(rng.integers(1, 3))):
            cand = np.argwhere(core & (labels == WM))
            if len(cand) == 0:
                break
            ly, lx = cand[rng.integers(len(cand))]
            rad = rng.uniform(*cfg.lesion_radius) * scale
            m = _ellipse(yy, xx, ly, lx, rad, rad) <= 1.0
            labels[m & core & (labels == WM)] = L
    return labels


def _render(rng: np.random.Generator, labels: np.ndarray, sigma: float) -> np.ndarray:
    means = class_means().astype(np.float64)
    img = means[:, labels]
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_phantom(cfg: PhantomConfig) -> list[Sample]:
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for _ in range(cfg.n_samples):
        labels = _phantom_labels(rng, cfg)
        samples.append(Sample(_render(rng, labels, cfg.noise_sigma), labels))
    return samples


# ---------------------------------------------------------------------------
# folds


def kfold_split(n: int, k: int, seed: int) -> list[list[int]]:
    """Shuffle 0..n-1 with ``seed`` and deal the indices round-robin into k folds."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [sorted(int(i) for i in perm[f::k]) for f in range(k)]


# ---------------------------------------------------------------------------
# containers


def _finish(path, payload: bytes) -> None:
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


def _open(path, magic: bytes) -> bytes:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: file too short")
    if blob[:4] != magic:
        raise MagicError(f"{path}: expected magic {magic!r}, found {blob[:4]!r}")
    if len(blob) < 6:
        raise TruncatedFileError(f"{path}: file too short")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    return blob


def _verify(path, blob: bytes, end: int) -> None:
    if len(blob) < end + 4:
        raise TruncatedFileError(f"{path}: expected {end + 4} bytes, found {len(blob)}")
    if len(blob) > end + 4:
        # a corrupted count field ends parsing early; report it as corruption
        # when the trailing CRC covers the rest of the file
        (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
        if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
            raise ChecksumError(f"{path}: CRC-32 mismatch")
        raise FormatError(f"{path}: {len(blob) - end - 4} trailing bytes")
    (stored,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(blob[:end]) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{path}: CRC-32 mismatch")


def dataset_bytes(samples: list[Sample]) -> bytes:
    if samples:
        c, h, w = samples[0].image.shape
    else:
        c, h, w = 0, 0, 0
    parts = [_DATASET_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, len(samples), c, h, w)]
    for s in samples:
        if s.image.shape != (c, h, w):
            raise ValueError("all samples in a dataset must share one shape")
        parts.append(s.image.astype("<f4").tobytes())
        parts.append(s.labels.astype(np.uint8).tobytes())
    return b"".join(parts)


def write_dataset(samples: list[Sample], path) -> None:
    _finish(path, dataset_bytes(samples))


def read_dataset(path) -> list[Sample]:
    blob = _open(path, DATASET_MAGIC)
    if len(blob) < _DATASET_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, _, n, c, h, w = _DATASET_HEADER.unpack_from(blob, 0)
    img_bytes, lab_bytes = 4 * c * h * w, h * w
    end = _DATASET_HEADER.size + n * (img_bytes + lab_bytes)
    _verify(path, blob, end)
    samples = []
    off = _DATASET_HEADER.size
    for _ in range(n):
        image = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
        off += img_bytes
        labels = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
        off += lab_bytes
        samples.append(Sample(image.astype(np.float32), labels.copy()))
    return samples


def write_params(tensors: dict[str, np.ndarray], path) -> None:
    """Named float32 tensors in the SEGP container."""
    parts = [_PARAMS_HEADER.pack(PARAMS_MAGIC, FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    _finish(path, b"".join(parts))


def read_params(path) -> dict[str, np.ndarray]:
    blob = _open(path, PARAMS_MAGIC)
    try:
        _, _, n = _PARAMS_HEADER.unpack_from(blob, 0)
        off = _PARAMS_HEADER.size
        out: dict[str, np.ndarray] = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            if off + ln > len(blob):
                raise struct.error("name runs past end")
            name = blob[off:off + ln].decode("utf-8", errors="replace")
            off += ln
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = math.prod(dims)
            if off + 4 * count > len(blob):
                raise struct.error("payload runs past end")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
            off += 4 * count
    except struct.error as exc:
        raise TruncatedFileError(f"{path}: {exc}") from exc
    _verify(path, blob, off)
    return out
