"""Sample containers, netpbm I/O, splitting, synthetic lung phantoms and overlays."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, FormatError
from .tensor import interpolation_matrix

NUM_CLASSES = 4
CLASS_NAMES = ("background", "lung-other", "ground-glass", "consolidation")

TP_COLOR = (255, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 255, 0)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise DimensionError(f"sample {self.id!r}: image {self.image.shape} and mask {self.mask.shape} "
                                 "must be equal 2D extents")


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise FormatError(f"PGM header ends at byte {pos} after {len(tokens)} of {count} fields")
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError(f"PGM header must end with one whitespace byte at byte {pos}")
    return tokens, pos + 1


def parse_pgm(buf: bytes) -> Tuple[np.ndarray, int]:
    """Decode a binary P5 image; returns (integer grid, maxval)."""
    tokens, start = _header_tokens(buf, 4)
    (magic, _), *fields = tokens
    if magic != b"P5":
        raise FormatError(f"not a binary PGM: magic {magic!r} at byte 0")
    values = []
    for (tok, off), name in zip(fields, ("width", "height", "maxval")):
        try:
            values.append(int(tok))
        except ValueError:
            raise FormatError(f"PGM {name} {tok!r} at byte {off} is not an integer") from None
        if values[-1] < 1:
            raise FormatError(f"PGM {name} {values[-1]} at byte {off} must be positive")
    width, height, maxval = values
    if maxval > 65535:
        raise FormatError(f"PGM maxval {maxval} at byte {fields[2][1]} exceeds 65535")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    actual = len(buf) - start
    if actual < expected:
        raise FormatError(f"PGM payload truncated at byte {start}: expected {expected} bytes, got {actual}")
    grid = np.frombuffer(buf, dtype=dtype, count=width * height, offset=start).reshape(height, width)
    if grid.max(initial=0) > maxval:
        raise FormatError(f"PGM sample exceeds maxval {maxval} in payload starting at byte {start}")
    return grid.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def load_pgm(path) -> np.ndarray:
    """Integer grid stored in a P5 file."""
    return parse_pgm(Path(path).read_bytes())[0]


def load_pgm_image(path) -> np.ndarray:
    """P5 file as floats scaled to [0, 1] by its maxval."""
    grid, maxval = parse_pgm(Path(path).read_bytes())
    return grid.astype(np.float32) / np.float32(maxval)


def pgm_bytes(grid, maxval: Optional[int] = None) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DimensionError(f"PGM grids are 2D, got shape {grid.shape}")
    if np.issubdtype(grid.dtype, np.floating):
        raise DataError("save_pgm expects integer samples; scale floats first (see image_to_pgm)")
    if grid.size and grid.min() < 0:
        raise DataError("PGM samples must be nonnegative")
    if maxval is None:
        maxval = 255 if grid.max(initial=0) <= 255 else 65535
    if grid.max(initial=0) > maxval or not 1 <= maxval <= 65535:
        raise DataError(f"samples exceed maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = grid.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + grid.astype(dtype).tobytes()


def save_pgm(grid, path, maxval: Optional[int] = None) -> None:
    Path(path).write_bytes(pgm_bytes(grid, maxval))


def image_to_pgm(image: np.ndarray, path, maxval: int = 65535) -> None:
    """Quantise a [0, 1] float image and write it as P5."""
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)
    save_pgm(q, path, maxval)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"PPM expects (H, W, 3), got {rgb.shape}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes()


def save_ppm(rgb, path) -> None:
    Path(path).write_bytes(ppm_bytes(rgb))


def load_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, start = _header_tokens(buf, 4)
    if tokens[0][0] != b"P6":
        raise FormatError(f"not a binary PPM: magic {tokens[0][0]!r} at byte 0")
    w, h, maxval = (int(t) for t, _ in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM is supported, maxval {maxval} at byte {tokens[3][1]}")
    expected = w * h * 3
    if len(buf) - start < expected:
        raise FormatError(f"PPM payload truncated at byte {start}: expected {expected} bytes, got {len(buf) - start}")
    return np.frombuffer(buf, dtype=np.uint8, count=expected, offset=start).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# resizing and normalisation
# ---------------------------------------------------------------------------

def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2D float image."""
    h, w = image.shape
    ry = interpolation_matrix(h, out_h)
    rx = interpolation_matrix(w, out_w)
    return (ry @ image.astype(np.float64) @ rx.T).astype(np.float32)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1, dtype=int)
    return np.rint(np.arange(n_out) * (n_in - 1) / (n_out - 1)).astype(int)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned nearest-neighbour resize; never invents labels."""
    h, w = mask.shape
    return mask[np.ix_(_nearest_index(h, out_h), _nearest_index(w, out_w))]


def normalize_image(image: np.ndarray, method: str = "minmax") -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if method == "minmax":
        lo, hi = image.min(), image.max()
        if hi == lo:
            warnings.warn("constant image normalised to zeros", RuntimeWarning, stacklevel=3)
            return np.zeros_like(image, dtype=np.float32)
        return ((image - lo) / (hi - lo)).astype(np.float32)
    if method == "zscore":
        std = image.std()
        if std == 0:
            warnings.warn("constant image normalised to zeros", RuntimeWarning, stacklevel=3)
            return np.zeros_like(image, dtype=np.float32)
        return ((image - image.mean()) / std).astype(np.float32)
    raise ConfigurationError(f"unknown normalisation {method!r}")


def normalize_resize(sample: Sample, target: int = 256, method: str = "minmax") -> Sample:
    """Normalise the image per slice, then resize image and mask to ``target`` squared.

    Resampling can drop the extreme pixels, so a min-max image is rescaled
    once more after the resize to keep its range exactly [0, 1].
    """
    if min(sample.image.shape) < 16:
        raise DimensionError(f"sample {sample.id!r} is {sample.image.shape}; both extents must be >= 16")
    image = normalize_image(sample.image, method)
    if image.shape != (target, target):
        image = resize_image(image, target, target)
        if method == "minmax" and image.max() > image.min():
            image = normalize_image(image, method)
        mask = resize_mask(sample.mask, target, target)
    else:
        mask = sample.mask.copy()
    return Sample(image, mask, sample.id)


# ---------------------------------------------------------------------------
# manifests and splitting
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    id: str
    image: str
    mask: str
    split: Optional[str] = None
    scan: Optional[str] = None

    def to_json(self) -> dict:
        out = {"id": self.id, "image": self.image, "mask": self.mask, "split": self.split}
        if self.scan is not None:
            out["scan"] = self.scan
        return out


@dataclass
class DatasetManifest:
    samples: List[ManifestEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [s.id for s in self.samples if split is None or s.split == split]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"samples": [s.to_json() for s in self.samples]}, indent=1),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
        if not isinstance(raw, dict) or not isinstance(raw.get("samples"), list):
            raise FormatError(f"{path}: expected an object with a 'samples' list")
        entries = []
        for i, item in enumerate(raw["samples"]):
            missing = {"id", "image", "mask"} - set(item)
            if missing:
                raise FormatError(f"{path}: sample {i} lacks {sorted(missing)}")
            split = item.get("split")
            if split is not None and split not in SPLITS:
                raise FormatError(f"{path}: sample {i} has unknown split {split!r}")
            entries.append(ManifestEntry(str(item["id"]), item["image"], item["mask"], split, item.get("scan")))
        if len({e.id for e in entries}) != len(entries):
            raise FormatError(f"{path}: duplicate sample ids")
        return cls(entries, path.parent)

    def load_sample(self, entry: ManifestEntry) -> Sample:
        image = load_pgm_image(self.root / entry.image)
        mask = load_pgm(self.root / entry.mask).astype(np.int64)
        if mask.max(initial=0) >= NUM_CLASSES:
            raise DataError(f"mask {entry.mask} has labels >= {NUM_CLASSES}")
        return Sample(image, mask, entry.id)

    def load_split(self, split: str) -> List[Sample]:
        return [self.load_sample(e) for e in self.samples if e.split == split]


def split(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Assign train/val/test 80/10/10 by scan (each of val/test gets ceil(10%) of scans).

    Entries sharing a ``scan`` key always land in the same split; entries
    without one are their own scan.
    """
    groups: Dict[str, List[ManifestEntry]] = {}
    for e in manifest.samples:
        groups.setdefault(e.scan if e.scan is not None else e.id, []).append(e)
    keys = sorted(groups)
    if len(keys) < 10:
        raise ConfigurationError(f"splitting needs at least 10 scans, got {len(keys)}")
    order = np.random.default_rng(seed).permutation(len(keys))
    n_hold = math.ceil(0.1 * len(keys))
    assign = {}
    for rank, i in enumerate(order):
        assign[keys[i]] = "test" if rank < n_hold else "val" if rank < 2 * n_hold else "train"
    out = [ManifestEntry(e.id, e.image, e.mask, assign[e.scan if e.scan is not None else e.id], e.scan)
           for e in manifest.samples]
    return DatasetManifest(out, manifest.root)


def split_samples(samples: Sequence[Sample], seed: int) -> Dict[str, List[Sample]]:
    """In-memory counterpart of :func:`split` for generated samples."""
    man = DatasetManifest([ManifestEntry(s.id, "", "") for s in samples])
    by_id = {e.id: e.split for e in split(man, seed).samples}
    return {name: [s for s in samples if by_id[s.id] == name] for name in SPLITS}


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

# mean intensity of each class in generated images
PHANTOM_LEVELS = {0: 0.08, 2: 0.42, 1: 0.66, 3: 0.92}


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float, angle: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _phantom(size: int, rng: np.random.Generator, idx: int) -> Sample:
    mask = np.zeros((size, size), dtype=np.int64)
    lungs = []
    for side in (-1, 1):
        cy = size * rng.uniform(0.45, 0.55)
        cx = size / 2 + side * size * rng.uniform(0.2, 0.25)
        ry = size * rng.uniform(0.28, 0.36)
        rx = size * rng.uniform(0.14, 0.19)
        lung = _ellipse(size, size, cy, cx, ry, rx, rng.uniform(-0.2, 0.2))
        lungs.append((lung, cy, cx, ry, rx))
        mask[lung] = 1
    for cls, prob in ((2, 0.9), (3, 0.9)):
        if rng.random() >= prob:
            continue
        for _ in range(int(rng.integers(1, 3))):
            lung, cy, cx, ry, rx = lungs[int(rng.integers(0, 2))]
            by = cy + rng.uniform(-0.5, 0.5) * ry
            bx = cx + rng.uniform(-0.4, 0.4) * rx
            r = size * rng.uniform(0.05, 0.1)
            blob = _ellipse(size, size, by, bx, r * rng.uniform(0.7, 1.3), r * rng.uniform(0.7, 1.3),
                            rng.uniform(0, math.pi)) & lung
            mask[blob] = cls
    image = np.zeros((size, size), dtype=np.float64)
    for cls, level in PHANTOM_LEVELS.items():
        image[mask == cls] = level
    # glass gets a mottled texture, everything a little noise
    texture = rng.normal(0.0, 0.04, size=(size, size))
    image += np.where(mask == 2, texture, 0.0)
    image += rng.normal(0.0, 0.02, size=(size, size))
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), mask, f"phantom{idx:05d}")


def synth_phantoms(n: int, size: int = 64, seed: int = 0) -> List[Sample]:
    """Generate ``n`` four-class lung phantoms, deterministic in ``seed``.

    Background is dark, two bright elliptical lungs carry class 1, and
    blobs inside the lungs are ground glass (class 2, mid intensity with
    texture) or consolidation (class 3, brightest).
    """
    if size < 32:
        raise ConfigurationError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    return [_phantom(size, rng, i) for i in range(n)]


def write_dataset(samples: Sequence[Sample], out_dir, seed: int = 0) -> DatasetManifest:
    """Write samples as PGM pairs plus a split ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img, msk = f"images/{s.id}.pgm", f"masks/{s.id}.pgm"
        image_to_pgm(s.image, out_dir / img)
        save_pgm(s.mask.astype(np.uint8), out_dir / msk, maxval=255)
        entries.append(ManifestEntry(s.id, img, msk))
    manifest = split(DatasetManifest(entries, out_dir), seed)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

def overlay_panels(pred_mask, true_mask, image=None, classes: Iterable[int] = (1, 2, 3)) -> np.ndarray:
    """RGB panels, one per class, tiled left to right.

    True positives are yellow, false positives red, false negatives green;
    true negatives show the source image in grey.
    """
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {true.shape} differ in shape")
    if image is None:
        grey = np.zeros(true.shape, dtype=np.uint8)
    else:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != true.shape:
            raise DimensionError(f"image {image.shape} does not match masks {true.shape}")
        grey = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    panels = []
    for c in classes:
        p, t = pred == c, true == c
        rgb = np.repeat(grey[..., None], 3, axis=2)
        rgb[p & t] = TP_COLOR
        rgb[p & ~t] = FP_COLOR
        rgb[~p & t] = FN_COLOR
        panels.append(rgb)
    return np.concatenate(panels, axis=1)


def color_counts(rgb: np.ndarray, panel_width: int) -> List[Dict[str, int]]:
    """Count TP/FP/FN colours in each horizontally tiled panel."""
    counts = []
    for start in range(0, rgb.shape[1], panel_width):
        panel = rgb[:, start:start + panel_width]
        counts.append({name: int(np.all(panel == color, axis=-1).sum())
                       for name, color in (("tp", TP_COLOR), ("fp", FP_COLOR), ("fn", FN_COLOR))})
    return counts


def render_overlay(pred_mask, true_mask, out_path, image=None, classes: Iterable[int] = (1, 2, 3)) -> np.ndarray:
    rgb = overlay_panels(pred_mask, true_mask, image, classes)
    save_ppm(rgb, out_path)
    return rgb
