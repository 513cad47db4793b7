"""
Append-only run directories and the files written into them.

Every artifact is created exclusively (an existing file is never
overwritten) and registered in ``manifest.jsonl`` with the run's config
hash and its sha256. JSON artifacts carry the hash inline as well.
"""

import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

import autodiff as ad
from errors import ArtifactExistsError, FormatError
from forward_model import Mask

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"


def to_gray(array: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Scale a 2D array linearly to uint8 (lo -> 0, hi -> 255)."""
    array = np.asarray(array, dtype=np.float64)
    lo = float(array.min()) if lo is None else lo
    hi = float(array.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(array.shape, dtype=np.uint8)
    scaled = (np.clip(array, lo, hi) - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def pgm_bytes(array: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> bytes:
    """Binary PGM (P5) encoding of a 2D array."""
    buffer = io.BytesIO()
    Image.fromarray(to_gray(array, lo, hi)).save(buffer, format="PPM")
    return buffer.getvalue()


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def read_metrics_csv(path: Union[str, Path]) -> List[Dict[str, float]]:
    """Rows of a metrics CSV (comment lines starting with '#' are skipped)."""
    with open(path, "r", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    rows = []
    for row in csv.DictReader(lines):
        try:
            rows.append({key: float(value) for key, value in row.items()})
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed metrics row {row}") from e
    return rows


class RunDirectory:
    """Output directory of one command invocation."""

    def __init__(self, root: Union[str, Path], config_hash: str):
        self.root = Path(root)
        self.config_hash = config_hash
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def _register(self, name: str, data: Optional[bytes]) -> None:
        entry = {
            "path": name,
            "config_hash": self.config_hash,
            # growing logs have no fixed digest
            "sha256": hashlib.sha256(data).hexdigest() if data is not None else None,
        }
        with open(self.root / MANIFEST, "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    def write_bytes(self, name: str, data: bytes) -> Path:
        """
        Create ``name`` with ``data``.

        Raises:
            ArtifactExistsError: If the file already exists
        """
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        try:
            with open(target, "xb") as f:
                f.write(data)
        except FileExistsError as e:
            raise ArtifactExistsError(f"refusing to overwrite {target}") from e
        self._register(name, data)
        logger.info(f"Wrote {target}")
        return target

    def write_json(self, name: str, payload: Union[Dict, List]) -> Path:
        if isinstance(payload, dict):
            payload = {**payload, "config_hash": self.config_hash}
        text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"
        return self.write_bytes(name, text.encode("utf-8"))

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        buffer = io.StringIO()
        buffer.write(f"# config_hash: {self.config_hash}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return self.write_bytes(name, buffer.getvalue().encode("utf-8"))

    def write_pgm(self, name: str, array: np.ndarray, lo: Optional[float] = None,
                  hi: Optional[float] = None) -> Path:
        return self.write_bytes(name, pgm_bytes(array, lo, hi))

    def write_mask(self, stem: str, mask: Mask) -> Tuple[Path, Path]:
        """Mask as a 0/255 PGM and as a JSON index list."""
        pgm = self.write_pgm(f"{stem}.pgm", mask.realize(), lo=0.0, hi=1.0)
        index = self.write_json(f"{stem}.json", {
            "mode": mask.mode,
            "extent": mask.extent,
            "count": mask.count(),
            "indices": mask.indices(),
        })
        return pgm, index

    def log_path(self, name: str) -> Path:
        """Path of an append-only JSON-lines log, registered once when first used."""
        target = self.root / name
        if target.exists():
            raise ArtifactExistsError(f"refusing to append to an existing log {target}")
        target.touch()
        self._register(name, None)
        return target

    def write_checkpoint(self, name: str, params: ad.Params, state: Optional[ad.AdamState] = None,
                         metadata: Optional[Dict] = None) -> Path:
        """SQSM checkpoint plus a JSON sidecar holding ``metadata`` and the config hash."""
        target = self.write_bytes(name, ad.encode_checkpoint(params, state))
        self.write_json(f"{name}.json", dict(metadata or {}))
        return target


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Optional[ad.AdamState], Dict]:
    """
    Load an SQSM checkpoint and its sidecar.

    Raises:
        FormatError: If either file is malformed or the sidecar is missing
    """
    path = Path(path)
    side = path.with_name(path.name + ".json")
    try:
        with open(side, "r") as f:
            metadata = json.load(f)
    except FileNotFoundError as e:
        raise FormatError(f"checkpoint sidecar {side} is missing") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint sidecar {side} is not valid JSON: {e}") from e
    with open(path, "rb") as f:
        params, state = ad.decode_checkpoint(f.read())
    return params, state, metadata
