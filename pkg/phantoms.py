"""
Synthetic ellipse phantoms and the SQDS dataset file format.

Phantoms are sums of anisotropic ellipses that share a base orientation,
so a global rotation gives their spectrum a measurable principal axis.
Each image has its own RNG stream derived from (seed, index), which makes
datasets bit-identical across runs and platforms.
"""

import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from errors import ArtifactExistsError, ConfigError, FormatError, ShapeError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"SQDS"
DATASET_VERSION = 1
HEADER = struct.Struct("<4sIII")
CRC = struct.Struct("<I")

ROTATION_NONE = "none"
ROTATION_UNIFORM = "uniform"
ROTATION_FIXED = "fixed"
ROTATIONS = (ROTATION_NONE, ROTATION_UNIFORM, ROTATION_FIXED)

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)

# ellipses stay inside the unit disc so a global rotation never clips them
MAX_CENTRE_RADIUS = 0.35
MAX_SEMI_AXIS = 0.55


@dataclass(frozen=True)
class PhantomSpec:
    """Generation parameters of a phantom dataset."""

    extent: int = 64
    min_ellipses: int = 3
    max_ellipses: int = 8
    intensity_min: float = 0.1
    intensity_max: float = 1.0
    rotation: str = ROTATION_NONE
    angle: float = 0.0
    orientation_jitter: float = math.pi / 12
    aspect_min: float = 0.2
    aspect_max: float = 0.5
    smoothing: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.extent < 8 or self.extent & (self.extent - 1):
            raise ConfigError(f"phantom extent {self.extent} must be a power of two >= 8")
        if not 0 <= self.min_ellipses <= self.max_ellipses:
            raise ConfigError(f"ellipse count range [{self.min_ellipses}, {self.max_ellipses}] is invalid")
        if not 0.0 <= self.intensity_min <= self.intensity_max <= 1.0:
            raise ConfigError(f"intensity range [{self.intensity_min}, {self.intensity_max}] must lie in [0, 1]")
        if self.rotation not in ROTATIONS:
            raise ConfigError(f"unknown rotation '{self.rotation}' (expected one of {ROTATIONS})")
        if not 0.0 < self.aspect_min <= self.aspect_max <= 1.0:
            raise ConfigError(f"aspect range [{self.aspect_min}, {self.aspect_max}] must lie in (0, 1]")
        if self.smoothing < 0 or self.orientation_jitter < 0:
            raise ConfigError("smoothing and orientation jitter must be non-negative")

    def to_dict(self) -> Dict:
        return asdict(self)


def _rotation_angle(spec: PhantomSpec, rng: np.random.Generator) -> float:
    if spec.rotation == ROTATION_UNIFORM:
        return float(rng.uniform(0.0, math.pi))
    if spec.rotation == ROTATION_FIXED:
        return spec.angle
    return 0.0


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator,
                     angle: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """
    Rasterise one phantom.

    Every random draw happens before the rotation is applied, so the same
    RNG state with two different angles gives the same object rotated.

    Args:
        spec: Generation parameters
        rng: Per-image generator
        angle: Global rotation overriding spec.rotation

    Returns:
        (float32 image in [0, 1] of shape (extent, extent), rotation angle)
    """
    count = int(rng.integers(spec.min_ellipses, spec.max_ellipses + 1))
    base = rng.uniform(0.0, math.pi)
    centres = rng.uniform(0.0, 1.0, size=(count, 2))
    semi_major = rng.uniform(0.1, MAX_SEMI_AXIS, size=count)
    aspect = rng.uniform(spec.aspect_min, spec.aspect_max, size=count)
    jitter = rng.uniform(-spec.orientation_jitter, spec.orientation_jitter, size=count)
    intensity = rng.uniform(spec.intensity_min, spec.intensity_max, size=count)
    phi = _rotation_angle(spec, rng) if angle is None else float(angle)

    coords = np.linspace(-1.0, 1.0, spec.extent)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    image = np.zeros((spec.extent, spec.extent))
    cos_phi, sin_phi = math.cos(phi), math.sin(phi)
    for i in range(count):
        # centre drawn uniformly inside the disc of radius MAX_CENTRE_RADIUS
        radius = MAX_CENTRE_RADIUS * math.sqrt(centres[i, 0])
        theta = 2.0 * math.pi * centres[i, 1]
        cx, cy = radius * math.cos(theta), radius * math.sin(theta)
        cx, cy = cos_phi * cx - sin_phi * cy, sin_phi * cx + cos_phi * cy
        orientation = base + jitter[i] + phi
        dx, dy = xx - cx, yy - cy
        u = (dx * math.cos(orientation) + dy * math.sin(orientation)) / semi_major[i]
        v = (-dx * math.sin(orientation) + dy * math.cos(orientation)) / (semi_major[i] * aspect[i])
        image[u * u + v * v <= 1.0] += intensity[i]

    if spec.smoothing > 0:
        image = gaussian_filter(image, sigma=spec.smoothing, mode="constant")
    return np.clip(image, 0.0, 1.0).astype(np.float32), phi


def assign_splits(count: int, split_seed: int,
                  fractions: Sequence[float] = DEFAULT_FRACTIONS) -> np.ndarray:
    """
    Split label (0 train, 1 val, 2 test) for every index.

    The first round(f_train * n) entries of a seeded permutation are train,
    the next round(f_val * n) are val and the rest test.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ConfigError(f"split fractions {list(fractions)} must be three non-negative values summing to 1")
    n_train = int(math.floor(fractions[0] * count + 0.5))
    n_val = min(int(math.floor(fractions[1] * count + 0.5)), count - n_train)
    order = np.random.default_rng([split_seed, count]).permutation(count)
    labels = np.full(count, 2, dtype=np.int8)
    labels[order[:n_train]] = 0
    labels[order[n_train:n_train + n_val]] = 1
    return labels


@dataclass
class Dataset:
    """Ordered phantom images with train/val/test labels."""

    images: np.ndarray
    split_seed: int = 0
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    angles: Optional[np.ndarray] = None
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ShapeError(f"dataset images must be (count, extent, extent), got {self.images.shape}")
        self.labels = assign_splits(len(self.images), self.split_seed, self.fractions)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def extent(self) -> int:
        return self.images.shape[-1]

    def split_indices(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split '{name}' (expected one of {SPLITS})")
        return np.flatnonzero(self.labels == SPLITS.index(name))

    def split(self, name: str) -> np.ndarray:
        return self.images[self.split_indices(name)]


def _phantom_at(spec: PhantomSpec, index: int) -> Tuple[np.ndarray, float]:
    return generate_phantom(spec, np.random.default_rng([spec.seed, index]))


def generate_dataset(spec: PhantomSpec, count: int, split_seed: int = 0,
                     fractions: Sequence[float] = DEFAULT_FRACTIONS, workers: int = 1) -> Dataset:
    """Generate ``count`` phantoms; image i uses the stream default_rng([seed, i])."""
    if count < 0:
        raise ConfigError(f"dataset count {count} must be non-negative")
    logger.info(f"Generating {count} phantoms ({spec.extent}x{spec.extent}, rotation={spec.rotation})")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _phantom_at(spec, i), range(count)))
    else:
        results = [_phantom_at(spec, i) for i in range(count)]
    images = np.stack([img for img, _ in results]) if results else np.zeros((0, spec.extent, spec.extent))
    angles = np.array([phi for _, phi in results])
    return Dataset(images, split_seed=split_seed, fractions=tuple(fractions), angles=angles)


def encode_dataset(dataset: Dataset) -> bytes:
    """SQDS bytes: header, little-endian float32 images, CRC32 of everything before it."""
    body = HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset), dataset.extent)
    body += dataset.images.astype("<f4").tobytes()
    return body + CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_dataset(data: bytes, split_seed: int = 0,
                   fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dataset:
    """
    Parse SQDS bytes.

    Raises:
        FormatError: On bad magic, unsupported version, truncation or checksum failure
    """
    if len(data) < HEADER.size + CRC.size:
        raise FormatError(f"dataset truncated: {len(data)} bytes")
    magic, version, count, extent = HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatError("not a SeqSample dataset (bad magic)")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    expected = HEADER.size + 4 * count * extent * extent + CRC.size
    if len(data) != expected:
        raise FormatError(f"dataset size {len(data)} does not match header ({expected} bytes expected)")
    (stored_crc,) = CRC.unpack_from(data, len(data) - CRC.size)
    if zlib.crc32(data[:-CRC.size]) & 0xFFFFFFFF != stored_crc:
        raise FormatError("dataset checksum mismatch")
    images = np.frombuffer(data, dtype="<f4", count=count * extent * extent, offset=HEADER.size)
    return Dataset(images.reshape(count, extent, extent).astype(np.float32),
                   split_seed=split_seed, fractions=tuple(fractions))


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def dataset_sidecar(dataset: Dataset, metadata: Optional[Dict] = None) -> Dict:
    """Sidecar contents: split settings, rotation angles and caller ``metadata``."""
    info = dict(metadata or {})
    info.update({"count": len(dataset), "extent": dataset.extent,
                 "split_seed": dataset.split_seed, "fractions": list(dataset.fractions)})
    if dataset.angles is not None:
        info["angles"] = [float(a) for a in dataset.angles]
    return info


def write_dataset(path: Union[str, Path], dataset: Dataset, metadata: Optional[Dict] = None) -> Path:
    """
    Write the dataset file and its JSON sidecar.

    Raises:
        ArtifactExistsError: If either file already exists
    """
    path = Path(path)
    side = sidecar_path(path)
    info = dataset_sidecar(dataset, metadata)
    try:
        with open(path, "xb") as f:
            f.write(encode_dataset(dataset))
        with open(side, "x") as f:
            json.dump(info, f, indent=2, sort_keys=True)
    except FileExistsError as e:
        raise ArtifactExistsError(f"refusing to overwrite {e.filename}") from e
    logger.info(f"Wrote {len(dataset)} images to {path}")
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Read a dataset file; split settings and angles come from the sidecar when present.

    Raises:
        FormatError: If the file or sidecar is malformed
    """
    path = Path(path)
    side = sidecar_path(path)
    info: Dict = {}
    if side.exists():
        try:
            with open(side, "r") as f:
                info = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"dataset sidecar {side} is not valid JSON: {e}") from e
    with open(path, "rb") as f:
        dataset = decode_dataset(f.read(), split_seed=int(info.get("split_seed", 0)),
                                 fractions=tuple(info.get("fractions", DEFAULT_FRACTIONS)))
    if "angles" in info and len(info["angles"]) == len(dataset):
        dataset.angles = np.asarray(info["angles"], dtype=np.float64)
    return dataset


def rotated_copy(spec: PhantomSpec, rotation: str = ROTATION_UNIFORM, angle: float = 0.0,
                 seed_offset: int = 1) -> PhantomSpec:
    """Spec for a held-out rotated set drawn from a different seed."""
    values = spec.to_dict()
    values.update({"rotation": rotation, "angle": angle, "seed": spec.seed + seed_offset})
    return PhantomSpec(**values)


def describe(dataset: Dataset) -> List[str]:
    return [f"{name}: {len(dataset.split_indices(name))}" for name in SPLITS]
