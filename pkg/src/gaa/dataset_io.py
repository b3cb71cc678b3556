"""Dataset trees, mask/image files, GAAT tensors and pair manifests.

Masks are ``numpy`` boolean arrays of shape ``(H, W)``; RGB images are
``uint8`` arrays of shape ``(H, W, 3)``. Everything here is a plain reader or
writer of distinct paths.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Sequence

import numpy as np
from PIL import Image

from gaa.errors import GaatFormatError

logger = logging.getLogger(__name__)

LAYOUTS = ("mvtec_ad", "mvtec_loco")
ANOMALY_KINDS = ("structural", "logical", "combined")

GAAT_MAGIC = b"GAAT"
GAAT_VERSION = 1
# 1 is the canonical exchange dtype; 2 keeps model parameters lossless.
GAAT_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_GAAT_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


def area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


# --------------------------------------------------------------------------
# masks and images
# --------------------------------------------------------------------------

def load_mask(path, threshold: int = 127) -> np.ndarray:
    """Read an 8-bit grayscale PNG and binarize it (``pixel > threshold``)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask not found: {path}")
    with Image.open(path) as im:
        if im.mode == "1":
            data = np.asarray(im.convert("L"))
        elif im.mode in ("L", "LA"):
            data = np.asarray(im.getchannel(0))
        else:
            raise ValueError(f"unsupported mask mode {im.mode!r} in {path}; expected 8-bit grayscale")
    if data.size == 0:
        raise ValueError(f"zero-size mask image: {path}")
    return data > threshold


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"mask must be a non-empty 2D array, got shape {mask.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("1", "L", "LA", "P", "RGB", "RGBA"):
            raise ValueError(f"unsupported image mode {im.mode!r} in {path}; expected 8-bit")
        data = np.asarray(im.convert("RGB"))
    if data.size == 0:
        raise ValueError(f"zero-size image: {path}")
    return data


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected uint8 (H, W, 3) image, got {image.dtype} {image.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


# --------------------------------------------------------------------------
# dataset scanning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AnomalyRecord:
    image: Path
    mask: Path
    label: str
    # LOCO ships several ground-truth files per image; they are unioned.
    extra_masks: tuple = ()

    def load_mask(self, threshold: int = 127) -> np.ndarray:
        mask = load_mask(self.mask, threshold)
        for p in self.extra_masks:
            mask |= load_mask(p, threshold)
        return mask


@dataclass(frozen=True)
class DatasetIndex:
    category: str
    root: Path
    layout: str
    normal_images: tuple
    anomaly_records: tuple
    region_records: dict = field(default_factory=dict)
    warnings: tuple = ()

    @property
    def labels(self) -> list[str]:
        return sorted({r.label for r in self.anomaly_records})


def _pngs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() == ".png")


def _subdirs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_dir())


def scan_dataset(root, layout: str = "mvtec_ad", regions_dir=None) -> DatasetIndex:
    """Index one MVTec-style category directory.

    ``root`` holds normal images in ``train/good`` and defects in ``test/<defect>``
    with masks under ``ground_truth/<defect>``.
    For ``mvtec_ad`` the ground truth of ``test/<d>/<stem>.png`` is
    ``ground_truth/<d>/<stem>_mask.png``; for ``mvtec_loco`` it is the folder
    ``ground_truth/<d>/<stem>/`` whose PNGs are unioned. Region masks live in
    ``regions_dir/<region>/<stem>.png`` (default ``root/regions``) and pair with
    ``train/good/<stem>.png``.

    Anomaly images without a mask are skipped with a warning. All lists are in
    lexicographic path order.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    for sub in ("train/good", "test", "ground_truth"):
        if not (root / sub).is_dir():
            raise FileNotFoundError(f"missing mandatory subtree {sub!r} under {root}")

    warnings: list[str] = []

    def warn(msg):
        logger.warning(msg)
        warnings.append(msg)

    normals = tuple(_pngs(root / "train" / "good"))

    records = []
    for defect_dir in _subdirs(root / "test"):
        label = defect_dir.name
        if label == "good":
            continue
        gt_dir = root / "ground_truth" / label
        for img in _pngs(defect_dir):
            if layout == "mvtec_ad":
                masks = [gt_dir / f"{img.stem}_mask.png"]
                masks = [m for m in masks if m.is_file()]
            else:
                masks = _pngs(gt_dir / img.stem)
            if not masks:
                warn(f"anomaly image without mask skipped: {img}")
                continue
            size = _image_size(img)
            bad = [m for m in masks if _image_size(m) != size]
            if bad:
                warn(f"mask/image size mismatch, skipped: {img} vs {bad[0]}")
                continue
            records.append(AnomalyRecord(img, masks[0], label, tuple(masks[1:])))

    regions_dir = Path(regions_dir) if regions_dir is not None else root / "regions"
    normal_by_stem = {p.stem: p for p in normals}
    region_records = {}
    for rdir in _subdirs(regions_dir):
        pairs = []
        for rmask in _pngs(rdir):
            img = normal_by_stem.get(rmask.stem)
            if img is None:
                warn(f"region mask without normal image skipped: {rmask}")
                continue
            if _image_size(img) != _image_size(rmask):
                warn(f"region mask size mismatch, skipped: {rmask}")
                continue
            if not load_mask(rmask).any():
                warn(f"empty region mask skipped: {rmask}")
                continue
            pairs.append((img, rmask))
        if pairs:
            region_records[rdir.name] = tuple(pairs)

    return DatasetIndex(
        category=root.name,
        root=root,
        layout=layout,
        normal_images=normals,
        anomaly_records=tuple(records),
        region_records=region_records,
        warnings=tuple(warnings),
    )


# --------------------------------------------------------------------------
# GAAT tensors
# --------------------------------------------------------------------------

def write_tensor(fp: BinaryIO, array: np.ndarray, dtype="<f4") -> None:
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype not in _GAAT_CODES:
        raise ValueError(f"unsupported GAAT dtype {dtype}")
    array = np.asarray(array)
    fp.write(GAAT_MAGIC)
    fp.write(struct.pack("<BBI", GAAT_VERSION, _GAAT_CODES[dtype], array.ndim))
    fp.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fp.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise GaatFormatError(f"truncated GAAT {what}: expected {n} bytes, got {len(data)}")
    return data


def read_tensor(fp: BinaryIO) -> np.ndarray:
    """Read one GAAT tensor from ``fp``, consuming exactly its bytes."""
    magic = fp.read(4)
    if magic != GAAT_MAGIC:
        raise GaatFormatError(f"bad magic {magic!r}")
    version, code, rank = struct.unpack("<BBI", _read_exact(fp, 6, "header"))
    if version != GAAT_VERSION:
        raise GaatFormatError(f"unsupported GAAT version {version}")
    if code not in GAAT_DTYPES:
        raise GaatFormatError(f"unsupported GAAT dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank, "dimensions"))
    dtype = GAAT_DTYPES[code]
    count = math.prod(shape)
    payload = _read_exact(fp, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensor(path, array: np.ndarray, dtype="<f4") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        write_tensor(fp, array, dtype)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"GAAT file not found: {path}")
    with open(path, "rb") as fp:
        array = read_tensor(fp)
        if fp.read(1):
            raise GaatFormatError(f"trailing bytes after GAAT payload in {path}")
    if not np.all(np.isfinite(array)):
        raise GaatFormatError(f"non-finite values in {path}")
    return array


def save_feature_file(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2D, got shape {matrix.shape}")
    save_tensor(path, matrix, "<f4")


def load_feature_file(path) -> np.ndarray:
    """Load an N x D feature matrix (float32) from a GAAT file."""
    matrix = load_tensor(path)
    if matrix.ndim != 2:
        raise GaatFormatError(f"expected a rank-2 feature matrix, got rank {matrix.ndim}")
    return matrix


# --------------------------------------------------------------------------
# pair manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path
    cluster_id: int
    kind: str
    ars: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}")

    def with_ars(self, value: float) -> "ManifestEntry":
        return ManifestEntry(self.image_path, self.mask_path, self.cluster_id, self.kind, float(value))


def _rel(path: Path, base: Path) -> str:
    path = Path(path)
    if path.is_absolute():
        return Path(os.path.relpath(path, base)).as_posix()
    return path.as_posix()


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    """Write one tab-separated record per line; paths relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    seen = set()
    lines = []
    for e in entries:
        key = Path(e.mask_path).resolve() if Path(e.mask_path).is_absolute() else e.mask_path
        if key in seen:
            raise ValueError(f"duplicate mask path in manifest: {e.mask_path}")
        seen.add(key)
        ars = "" if e.ars is None else repr(float(e.ars))
        fields = (_rel(e.image_path, base), _rel(e.mask_path, base), str(int(e.cluster_id)), e.kind, ars)
        if any("\t" in f or "\n" in f for f in fields):
            raise ValueError(f"manifest field contains a tab or newline: {fields}")
        lines.append("\t".join(fields) + "\n")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.writelines(lines)


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent.resolve()
    entries = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            img, msk, cid, kind, ars = parts
            ars_value = float(ars) if ars.strip() else None
            if ars_value is not None and not math.isfinite(ars_value):
                raise ValueError(f"{path}:{lineno}: non-finite ARS {ars!r}")
            entries.append(ManifestEntry(base / img, base / msk, int(cid), kind, ars_value))
    return entries

