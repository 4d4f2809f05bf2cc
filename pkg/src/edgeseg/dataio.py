"""Netpbm image/mask I/O, JSON dataset manifests and a synthetic task generator."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import IGNORE_LABEL, ClassSet
from .tensor import DTYPE


class NetpbmError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class MissingFieldError(ManifestError):
    pass


class MissingFileError(ManifestError):
    pass


class DuplicateSampleError(ManifestError):
    pass


# ------------------------------------------------------------------- netpbm


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval``; returns (width, height, maxval, raster offset)."""
    if data[:2] != magic:
        raise NetpbmError(f"{path}: bad magic {data[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: malformed header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise NetpbmError(f"{path}: malformed header")
    width, height, maxval = fields
    return width, height, maxval, pos + 1


def read_netpbm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 into a uint8 (H, W) or (H, W, 3) array."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: bad magic {magic!r}, expected b'P5' or b'P6'")
    width, height, maxval, off = _read_header(data, magic, path)
    if maxval != 255:
        raise NetpbmError(f"{path}: maxval {maxval} not supported (only 255)")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = data[off : off + n]
    if len(raster) < n:
        raise NetpbmError(f"{path}: truncated payload ({len(raster)} of {n} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((height, width, 3) if channels == 3 else (height, width)).copy()


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) array, got {gray.shape}")
    if gray.min(initial=0) < 0 or gray.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.astype(np.uint8).tobytes())


def load_image_ppm(path: str | os.PathLike) -> np.ndarray:
    """P6 image -> (1, 3, H, W) float32 tensor in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise NetpbmError(f"{path}: bad magic {data[:2]!r}, expected b'P6'")
    rgb = read_netpbm(path)
    return (rgb.transpose(2, 0, 1)[None].astype(DTYPE) / DTYPE(255.0)).astype(DTYPE)


def _validate_mask(mask: np.ndarray, classes: ClassSet, path) -> np.ndarray:
    bad = (mask >= classes.K) & (mask != classes.ignore_label)
    if bad.any():
        y, x = (int(v) for v in np.argwhere(bad)[0])
        raise NetpbmError(f"{path}: label {int(mask[y, x])} at (row {y}, col {x}) is not a class id < {classes.K} or ignore label {classes.ignore_label}")
    return mask


def load_mask_pgm(path: str | os.PathLike, classes: ClassSet) -> np.ndarray:
    """P5 class-index mask -> (H, W) int64 grid, validated against ``classes``."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise NetpbmError(f"{path}: bad magic {data[:2]!r}, expected b'P5'")
    return _validate_mask(read_netpbm(path).astype(np.int64), classes, path)


def load_mask_palette(path: str | os.PathLike, classes: ClassSet, palette: dict[tuple[int, int, int], int]) -> np.ndarray:
    """Colour-coded P6 mask -> class ids via a colour table; unmapped colours are errors."""
    rgb = read_netpbm(path)
    if rgb.ndim != 3:
        raise NetpbmError(f"{path}: palette masks must be P6 colour images")
    key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    out = np.full(key.shape, -1, dtype=np.int64)
    for (r, g, b), cid in palette.items():
        out[key == ((r << 16) | (g << 8) | b)] = cid
    if (out < 0).any():
        y, x = (int(v) for v in np.argwhere(out < 0)[0])
        raise NetpbmError(f"{path}: colour {tuple(int(v) for v in rgb[y, x])} at (row {y}, col {x}) is not in the palette")
    return _validate_mask(out, classes, path)


# ----------------------------------------------------------------- manifest


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W)
    mask: np.ndarray  # (H, W)


@dataclass
class DatasetManifest:
    classes: ClassSet
    samples: list[tuple[Path, Path]]
    palette: Optional[dict[tuple[int, int, int], int]] = None
    path: Optional[Path] = None

    @property
    def ignore_label(self) -> int:
        return self.classes.ignore_label

    def __len__(self) -> int:
        return len(self.samples)

    def load_sample(self, i: int) -> Sample:
        img_path, mask_path = self.samples[i]
        image = load_image_ppm(img_path)
        if self.palette is None:
            mask = load_mask_pgm(mask_path, self.classes)
        else:
            mask = load_mask_palette(mask_path, self.classes, self.palette)
        if image.shape[2:] != mask.shape:
            raise ManifestError(f"{img_path}: image is {image.shape[2:]} but mask {mask_path} is {mask.shape}")
        return Sample(image, mask)

    def load_all(self) -> list[Sample]:
        return [self.load_sample(i) for i in range(len(self))]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise MissingFieldError(f"{where}: missing required field {key!r}")
    return obj[key]


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read and validate a dataset manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    names = _require(doc, "classes", str(path))
    ignore = int(doc.get("ignore_label", IGNORE_LABEL))
    try:
        classes = ClassSet(tuple(names), ignore)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    root = path.parent
    samples: list[tuple[Path, Path]] = []
    seen: set[tuple[Path, Path]] = set()
    for i, entry in enumerate(_require(doc, "samples", str(path))):
        where = f"{path}: samples[{i}]"
        if not isinstance(entry, dict):
            raise ManifestError(f"{where}: must be an object")
        pair = tuple((root / _require(entry, key, where)).resolve() for key in ("image", "mask"))
        for p in pair:
            if not p.is_file():
                raise MissingFileError(f"{where}: file not found: {p}")
        if pair in seen:
            raise DuplicateSampleError(f"{where}: duplicate sample {pair[0].name} / {pair[1].name}")
        seen.add(pair)
        samples.append(pair)
    palette = None
    if "palette" in doc:
        palette = {}
        for j, item in enumerate(doc["palette"]):
            colour = tuple(int(v) for v in _require(item, "color", f"{path}: palette[{j}]"))
            palette[colour] = int(_require(item, "id", f"{path}: palette[{j}]"))
    return DatasetManifest(classes, samples, palette, path)


# ---------------------------------------------------------------- synthetic

_LEVELS = (0.1, 0.9, 0.5)
# Equal-brightness primaries first so small-K tasks separate on hue alone,
# then the rest of the {0.1, 0.5, 0.9} grid (cube corners before mid-points).
# Any two entries differ by at least 0.4 in some channel.
_PRIMARIES = ((0.9, 0.1, 0.1), (0.1, 0.9, 0.1), (0.1, 0.1, 0.9))
SYNTH_PALETTE = _PRIMARIES + tuple(
    sorted(
        (c for c in itertools.product(_LEVELS, repeat=3) if c not in _PRIMARIES),
        key=lambda c: (sum(v == 0.5 for v in c), c),
    )
)
SYNTH_NOISE = 0.05


def _render_sample(rng: np.random.Generator, size: int, k: int):
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for cls in range(1, k):
        extent = rng.integers(size // 2, size + 1)
        cy, cx = rng.integers(0, size, size=2)
        if rng.random() < 0.5:
            y0, x0 = max(0, cy - extent // 2), max(0, cx - extent // 2)
            region = (yy >= y0) & (yy < y0 + extent) & (xx >= x0) & (xx < x0 + extent)
        else:
            r = extent / 2.0
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask[region] = cls
    colours = np.asarray(SYNTH_PALETTE[:k])
    image = colours[mask] + rng.normal(0.0, SYNTH_NOISE, size=(size, size, 3))
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return rgb, mask


def synthesize_dataset(n: int, size: int, k: int, seed: int, out_dir: str | os.PathLike) -> Path:
    """Write ``n`` image/mask pairs plus ``manifest.json``; returns the manifest path.

    Class 0 is background; each foreground class paints one random rectangle
    or disc with extent between size/2 and size (later classes occlude
    earlier ones, shapes may be clipped by the border) in its own mean colour,
    with Gaussian noise of sigma 0.05.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if size < 32 or size % 32:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    if not 2 <= k <= len(SYNTH_PALETTE):
        raise ValueError(f"classes must be in [2, {len(SYNTH_PALETTE)}], got {k}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        rgb, mask = _render_sample(rng, size, k)
        img_name, mask_name = f"image_{i:04d}.ppm", f"mask_{i:04d}.pgm"
        write_ppm(out / img_name, rgb)
        write_pgm(out / mask_name, mask)
        samples.append({"image": img_name, "mask": mask_name})
    names = ["background"] + [f"class{c}" for c in range(1, k)]
    manifest = {"classes": names, "ignore_label": IGNORE_LABEL, "seed": seed, "samples": samples}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def write_manifest(path: str | os.PathLike, classes: Sequence[str], samples: Sequence[tuple[str, str]], ignore_label: int = IGNORE_LABEL) -> Path:
    path = Path(path)
    doc = {
        "classes": list(classes),
        "ignore_label": ignore_label,
        "samples": [{"image": str(a), "mask": str(b)} for a, b in samples],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
