"""Ingestion and persistence: masks, instances, annotation CSVs, toy corpora.

The canonical mask format is binary PGM (P5), 0 = background and any
nonzero value = foreground. PNG masks work when pillow is installed (the
``png`` extra). Annotation CSVs use the fixed header
``image_id,user_id,device,x1,y1,x2,y2`` with raw (possibly unordered)
coordinates that are clipped at evaluation time.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnnotationParseError, InvalidInputError
from .geometry import BBox
from .segmodel import Instance, make_instance

DEVICES = ("desktop", "mobile")
ANNOTATION_HEADER = ["image_id", "user_id", "device", "x1", "y1", "x2", "y2"]


@dataclass(frozen=True)
class UserAnnotation:
    image_id: str
    user_id: str
    device: str
    bbox: BBox  # raw coordinates, clipped at evaluation time


# --- PGM / PNG masks ---------------------------------------------------------


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit binary (P5) or ASCII (P2) PGM file."""
    data = Path(path).read_bytes()
    try:
        magic, rest = data.split(None, 1)
    except ValueError:
        raise InvalidInputError(f"{path}: not a PGM file") from None
    if magic not in (b"P5", b"P2"):
        raise InvalidInputError(f"{path}: unsupported PGM magic {magic!r}")

    # Header: width, height, maxval; '#' comments allowed between tokens.
    tokens: list[int] = []
    pos = 0
    while len(tokens) < 3:
        while pos < len(rest) and rest[pos : pos + 1].isspace():
            pos += 1
        if pos < len(rest) and rest[pos : pos + 1] == b"#":
            eol = rest.find(b"\n", pos)
            pos = len(rest) if eol == -1 else eol + 1
            continue
        start = pos
        while pos < len(rest) and not rest[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError(f"{path}: truncated PGM header")
        try:
            tokens.append(int(rest[start:pos]))
        except ValueError:
            raise InvalidInputError(f"{path}: bad PGM header token") from None
    width, height, maxval = tokens
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise InvalidInputError(f"{path}: bad PGM dimensions {width}x{height}/{maxval}")

    if magic == b"P5":
        raster = rest[pos + 1 : pos + 1 + width * height]
        if len(raster) != width * height:
            raise InvalidInputError(f"{path}: PGM raster truncated")
        return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
    values = rest[pos:].split()
    if len(values) != width * height:
        raise InvalidInputError(f"{path}: PGM raster truncated")
    return np.array([int(v) for v in values], dtype=np.uint8).reshape(height, width)


def pgm_bytes(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.ndim != 2:
        raise InvalidInputError(f"mask must be 2-D, got shape {a.shape}")
    a = a.astype(np.uint8)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes()


def write_pgm(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(array))


def _read_png_mask(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:
        raise InvalidInputError(
            f"{path}: PNG masks need pillow (install the 'png' extra)"
        ) from None
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def read_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"{path}: no such file")
    if path.suffix.lower() == ".png":
        return _read_png_mask(path)
    return read_pgm(path)


def load_instance(mask_path: str | Path, image_id: str | None = None) -> Instance:
    """Build an Instance from a mask file; image_id defaults to the stem."""
    path = Path(mask_path)
    mask = read_mask(path)
    return make_instance(image_id or path.stem, mask)


# --- rescaling ----------------------------------------------------------------


def downscale_longest(inst: Instance, limit: int = 1024) -> Instance:
    """Downscale so the longer side is exactly ``limit`` (identity if within).

    Nearest-neighbor resampling keeps labels binary; the tight box and
    objectness field are recomputed at the new size.
    """
    if limit < 1:
        raise InvalidInputError(f"limit must be >= 1, got {limit}")
    longest = max(inst.width, inst.height)
    if longest <= limit:
        return inst
    scale = limit / longest
    new_w = max(1, round(inst.width * scale))
    new_h = max(1, round(inst.height * scale))
    src_rows = np.minimum(
        ((np.arange(new_h) + 0.5) * inst.height / new_h).astype(int), inst.height - 1
    )
    src_cols = np.minimum(
        ((np.arange(new_w) + 0.5) * inst.width / new_w).astype(int), inst.width - 1
    )
    mask = inst.gt_mask[np.ix_(src_rows, src_cols)]
    return make_instance(inst.image_id, mask)


# --- annotations ----------------------------------------------------------------


def load_annotations(csv_path: str | Path) -> list[UserAnnotation]:
    """Parse an annotation CSV; malformed rows raise with their line number."""
    out = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise AnnotationParseError("empty file", 1) from None
        if header != ANNOTATION_HEADER:
            raise AnnotationParseError(
                f"header must be {','.join(ANNOTATION_HEADER)}", 1
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7:
                raise AnnotationParseError(f"expected 7 fields, got {len(row)}", line_no)
            image_id, user_id, device = row[0], row[1], row[2]
            if device not in DEVICES:
                raise AnnotationParseError(
                    f"device must be one of {DEVICES}, got {device!r}", line_no
                )
            try:
                coords = [float(v) for v in row[3:7]]
            except ValueError:
                raise AnnotationParseError(f"bad coordinate in {row[3:7]}", line_no) from None
            out.append(
                UserAnnotation(image_id, user_id, device, BBox(*coords))
            )
    return out


def write_annotations(csv_path: str | Path, annotations: Sequence[UserAnnotation]) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for a in annotations:
            writer.writerow(
                [a.image_id, a.user_id, a.device]
                + [repr(v) for v in (a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2)]
            )


# --- synthetic corpus -------------------------------------------------------------


def _rect(mask, rng, size):
    w = int(rng.integers(size // 4, size // 2 + 1))
    h = int(rng.integers(size // 4, size // 2 + 1))
    x0 = int(rng.integers(2, size - w - 2))
    y0 = int(rng.integers(2, size - h - 2))
    mask[y0 : y0 + h, x0 : x0 + w] = 1


def _ellipse(mask, rng, size):
    a = int(rng.integers(size // 8, size // 4 + 1))
    b = int(rng.integers(size // 8, size // 4 + 1))
    cx = int(rng.integers(a + 2, size - a - 2))
    cy = int(rng.integers(b + 2, size - b - 2))
    yy, xx = np.mgrid[0:size, 0:size]
    mask[((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0] = 1


def _lshape(mask, rng, size):
    _rect(mask, rng, size)
    rows, cols = np.nonzero(mask)
    y0, y1 = rows.min(), rows.max() + 1
    x0, x1 = cols.min(), cols.max() + 1
    # carve out one quadrant
    qy = (y0 + y1) // 2
    qx = (x0 + x1) // 2
    corner = int(rng.integers(0, 4))
    if corner == 0:
        mask[y0:qy, x0:qx] = 0
    elif corner == 1:
        mask[y0:qy, qx:x1] = 0
    elif corner == 2:
        mask[qy:y1, x0:qx] = 0
    else:
        mask[qy:y1, qx:x1] = 0


def _blobs(mask, rng, size):
    # one main blob plus a small satellite; both are foreground
    a = int(rng.integers(size // 8, size // 5 + 1))
    cx = int(rng.integers(a + 2, size - a - 2))
    cy = int(rng.integers(a + 2, size - a - 2))
    yy, xx = np.mgrid[0:size, 0:size]
    mask[(xx - cx) ** 2 + (yy - cy) ** 2 <= a * a] = 1
    r = max(2, int(rng.integers(size // 16, size // 10 + 1)))
    sx = int(rng.integers(r + 1, size - r - 1))
    sy = int(rng.integers(r + 1, size - r - 1))
    mask[(xx - sx) ** 2 + (yy - sy) ** 2 <= r * r] = 1


_SHAPES = (_rect, _ellipse, _lshape, _blobs)


def make_toy_corpus(n: int, size: int, seed: int) -> list[Instance]:
    """Deterministic synthetic instances (rectangles, ellipses, L-shapes,
    blob pairs) with per-image distractor patterns."""
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if size < 16:
        raise InvalidInputError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = np.zeros((size, size), dtype=np.uint8)
        shape = _SHAPES[int(rng.integers(0, len(_SHAPES)))]
        shape(mask, rng, size)
        out.append(make_instance(f"toy-{seed}-{size}-{i:03d}", mask))
    return out


# --- corpus persistence -------------------------------------------------------------


def write_corpus(out_dir: str | Path, instances: Sequence[Instance], meta: dict | None = None) -> Path:
    """Write masks as PGM plus a manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for inst in instances:
        mask_name = f"{inst.image_id}.pgm"
        write_pgm(out / mask_name, inst.gt_mask.astype(np.uint8) * 255)
        entries.append(
            {
                "image_id": inst.image_id,
                "mask": mask_name,
                "width": inst.width,
                "height": inst.height,
            }
        )
    manifest = {"instances": entries}
    if meta:
        manifest.update(meta)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_corpus(corpus_dir: str | Path) -> list[Instance]:
    """Load all instances listed in a corpus manifest."""
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InvalidInputError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    out = []
    for entry in manifest["instances"]:
        inst = load_instance(root / entry["mask"], image_id=entry["image_id"])
        if inst.width != entry["width"] or inst.height != entry["height"]:
            raise InvalidInputError(
                f"{entry['image_id']}: mask size {inst.width}x{inst.height} "
                f"does not match manifest {entry['width']}x{entry['height']}"
            )
        out.append(inst)
    return out
