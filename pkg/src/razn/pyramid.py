"""Tiled multi-resolution image + label pyramids and patch geometry.

Level 0 is the coarsest; level ``l + 1`` is ``rate`` times larger than level
``l`` along each axis. Windows are half-open ``[origin, origin + extent)`` in
``(row, col)`` order.

On disk a dataset is a directory holding ``manifest.json`` and one
``level_<l>/`` directory per level with 8-bit RGB image tiles and
single-channel label tiles, both PNG.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, MaxMagnificationError, PatchRangeError, ValidationError

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
CLASS_NAMES = ("normal", "benign", "in_situ", "invasive")


@dataclass(frozen=True)
class PatchRef:
    level: int
    row: int
    col: int
    height: int
    width: int

    @property
    def origin(self) -> tuple[int, int]:
        return self.row, self.col

    @property
    def extent(self) -> tuple[int, int]:
        return self.height, self.width

    def as_list(self) -> list[int]:
        return [self.level, self.row, self.col, self.height, self.width]

    @classmethod
    def from_list(cls, v: Sequence[int]) -> "PatchRef":
        return cls(*(int(x) for x in v))


@dataclass(frozen=True)
class PatchGrid:
    parent: PatchRef
    rate: int
    children: tuple[PatchRef, ...]


def _tile_name(kind: str, ty: int, tx: int) -> str:
    return f"{kind}_{ty:04d}_{tx:04d}.png"


class PyramidDataset:
    """Read-only view of an on-disk pyramid.

    Decoded tiles are cached in memory; the dataset itself never changes after
    :meth:`open`, so concurrent readers need no coordination.
    """

    def __init__(self, root: Path, manifest: dict, max_cached_tiles: int = 4096):
        self.root = Path(root)
        self.manifest = manifest
        self.rate = int(manifest["rate"])
        self.levels = int(manifest["levels"])
        self.dims = [tuple(int(v) for v in d) for d in manifest["dims"]]
        self.tile_size = int(manifest["tile_size"])
        self.class_names = tuple(manifest.get("classes", CLASS_NAMES))
        self.num_classes = len(self.class_names)
        self._cache: dict[tuple[str, int, int, int], np.ndarray] = {}
        self._max_cached = max_cached_tiles
        validate_manifest(manifest)

    @classmethod
    def open(cls, root, **kwargs) -> "PyramidDataset":
        root = Path(root)
        path = root / MANIFEST
        if not path.is_file():
            raise ConfigError(f"no {MANIFEST} under {root}")
        with open(path) as fh:
            manifest = json.load(fh)
        return cls(root, manifest, **kwargs)

    def __repr__(self) -> str:
        return f"PyramidDataset({str(self.root)!r}, levels={self.levels}, rate={self.rate}, dims={self.dims})"

    # ------------------------------------------------------------ reading

    def full_ref(self, level: int) -> PatchRef:
        H, W = self.dims[level]
        return PatchRef(level, 0, 0, H, W)

    def check_ref(self, ref: PatchRef) -> None:
        if not 0 <= ref.level < self.levels:
            raise PatchRangeError(f"level {ref.level} outside [0, {self.levels})")
        H, W = self.dims[ref.level]
        if ref.height < 1 or ref.width < 1:
            raise PatchRangeError(f"empty window {ref}")
        if ref.row < 0 or ref.col < 0 or ref.row + ref.height > H or ref.col + ref.width > W:
            raise PatchRangeError(f"window {ref} exceeds level {ref.level} bounds {H}x{W}")

    def _tile(self, kind: str, level: int, ty: int, tx: int) -> np.ndarray:
        key = (kind, level, ty, tx)
        arr = self._cache.get(key)
        if arr is None:
            with Image.open(self.root / f"level_{level}" / _tile_name(kind, ty, tx)) as im:
                arr = np.asarray(im)
            if len(self._cache) >= self._max_cached:
                self._cache.clear()
            self._cache[key] = arr
        return arr

    def _read(self, kind: str, ref: PatchRef) -> np.ndarray:
        self.check_ref(ref)
        ts = self.tile_size
        r0, r1 = ref.row, ref.row + ref.height
        c0, c1 = ref.col, ref.col + ref.width
        shape = (ref.height, ref.width, 3) if kind == "image" else (ref.height, ref.width)
        out = np.empty(shape, dtype=np.uint8)
        for ty in range(r0 // ts, (r1 - 1) // ts + 1):
            for tx in range(c0 // ts, (c1 - 1) // ts + 1):
                tile = self._tile(kind, ref.level, ty, tx)
                ys, xs = max(r0, ty * ts), max(c0, tx * ts)
                ye, xe = min(r1, ty * ts + tile.shape[0]), min(c1, tx * ts + tile.shape[1])
                out[ys - r0 : ye - r0, xs - c0 : xe - c0] = tile[ys - ty * ts : ye - ty * ts, xs - tx * ts : xe - tx * ts]
        return out

    def read_image(self, ref: PatchRef) -> np.ndarray:
        """``uint8 [3, H, W]``."""
        return np.ascontiguousarray(self._read("image", ref).transpose(2, 0, 1))

    def read_labels(self, ref: PatchRef) -> np.ndarray:
        """``uint8 [H, W]`` class indices."""
        return self._read("labels", ref)

    def read_patch(self, ref: PatchRef) -> tuple[np.ndarray, np.ndarray]:
        return self.read_image(ref), self.read_labels(ref)

    def grid_refs(self, level: int, size: int) -> list[PatchRef]:
        """All aligned ``size x size`` windows of a level in row-major order."""
        H, W = self.dims[level]
        return [PatchRef(level, r, c, size, size) for r in range(0, H - size + 1, size) for c in range(0, W - size + 1, size)]


def validate_manifest(m: dict) -> None:
    for key in ("version", "rate", "levels", "dims", "tile_size"):
        if key not in m:
            raise ConfigError(f"manifest missing {key!r}")
    if m["version"] != FORMAT_VERSION:
        raise ConfigError(f"unsupported pyramid format version {m['version']}")
    r, L, dims = int(m["rate"]), int(m["levels"]), m["dims"]
    if r < 1 or L < 1 or len(dims) != L:
        raise ConfigError("manifest levels/rate/dims are inconsistent")
    for lvl in range(L - 1):
        if [d * r for d in dims[lvl]] != list(dims[lvl + 1]):
            raise ConfigError(f"level {lvl + 1} dims {dims[lvl + 1]} are not {r}x level {lvl} dims {dims[lvl]}")
    if int(m["tile_size"]) < 1:
        raise ConfigError("tile_size must be positive")


class PyramidWriter:
    """Writes tiles level by level, then the manifest (last, so a partial
    directory never opens as a dataset)."""

    def __init__(self, root, dims: Sequence[tuple[int, int]], rate: int, tile_size: int, meta: dict | None = None):
        self.root = Path(root)
        self.manifest = {
            "version": FORMAT_VERSION,
            "rate": int(rate),
            "levels": len(dims),
            "dims": [list(map(int, d)) for d in dims],
            "tile_size": int(tile_size),
            "classes": list(CLASS_NAMES),
        }
        self.manifest.update(meta or {})
        validate_manifest(self.manifest)
        for lvl in range(len(dims)):
            (self.root / f"level_{lvl}").mkdir(parents=True, exist_ok=True)

    def tiles(self, level: int) -> Iterator[tuple[int, int, PatchRef]]:
        H, W = self.manifest["dims"][level]
        ts = self.manifest["tile_size"]
        for ty in range(-(-H // ts)):
            for tx in range(-(-W // ts)):
                yield ty, tx, PatchRef(level, ty * ts, tx * ts, min(ts, H - ty * ts), min(ts, W - tx * ts))

    def write_tile(self, level: int, ty: int, tx: int, image_hwc: np.ndarray, labels: np.ndarray) -> None:
        d = self.root / f"level_{level}"
        Image.fromarray(np.ascontiguousarray(image_hwc, dtype=np.uint8), mode="RGB").save(d / _tile_name("image", ty, tx))
        Image.fromarray(np.ascontiguousarray(labels, dtype=np.uint8), mode="L").save(d / _tile_name("labels", ty, tx))

    def finish(self) -> PyramidDataset:
        with open(self.root / MANIFEST, "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return PyramidDataset.open(self.root)


# ------------------------------------------------------------------ geometry


def zoom_region(ds: PyramidDataset, ref: PatchRef) -> PatchRef:
    """The same physical window one level finer."""
    if ref.level + 1 >= ds.levels:
        raise MaxMagnificationError(f"level {ref.level} is already the finest of {ds.levels}")
    r = ds.rate
    out = PatchRef(ref.level + 1, ref.row * r, ref.col * r, ref.height * r, ref.width * r)
    ds.check_ref(out)
    return out


def crop_grid(ref: PatchRef, rate: int) -> PatchGrid:
    """Split a ``[rH, rW]`` window into ``rate**2`` ``[H, W]`` children, row-major."""
    if rate < 1 or ref.height % rate or ref.width % rate:
        raise ConfigError(f"extent {ref.extent} not divisible by rate {rate}")
    h, w = ref.height // rate, ref.width // rate
    children = tuple(
        PatchRef(ref.level, ref.row + i * h, ref.col + j * w, h, w) for i in range(rate) for j in range(rate)
    )
    return PatchGrid(ref, rate, children)


def stitch(grid: PatchGrid, masks: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse of :func:`crop_grid` for per-child arrays (leading dims ``[H, W]``)."""
    r = grid.rate
    if len(masks) != r * r:
        raise ValidationError(f"expected {r * r} child masks, got {len(masks)}")
    h, w = grid.children[0].extent
    first = np.asarray(masks[0])
    for m in masks:
        if np.asarray(m).shape[:2] != (h, w) or np.asarray(m).shape[2:] != first.shape[2:]:
            raise ValidationError(f"child mask shape {np.asarray(m).shape} does not match extent {(h, w)}")
    rows = [np.concatenate([np.asarray(masks[i * r + j]) for j in range(r)], axis=1) for i in range(r)]
    return np.concatenate(rows, axis=0)


def label_downsample(fine: np.ndarray, rate: int, num_classes: int | None = None) -> np.ndarray:
    """Majority vote over ``rate x rate`` blocks; ties go to the largest class index."""
    fine = np.asarray(fine)
    H, W = fine.shape
    if H % rate or W % rate:
        raise ConfigError(f"mask {H}x{W} not divisible by rate {rate}")
    if rate == 1:
        return fine.copy()
    C = int(num_classes or (int(fine.max()) + 1 if fine.size else 1))
    blocks = fine.reshape(H // rate, rate, W // rate, rate)
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in range(C)], axis=-1)
    # argmax picks the first maximum, so search classes from the top down
    return (C - 1 - counts[..., ::-1].argmax(axis=-1)).astype(fine.dtype)


def label_upsample(mask: np.ndarray, rate: int) -> np.ndarray:
    """Nearest-neighbour replication by ``rate`` along both axes."""
    mask = np.asarray(mask)
    return np.repeat(np.repeat(mask, rate, axis=0), rate, axis=1)


def area_downsample(image_chw: np.ndarray, rate: int) -> np.ndarray:
    """Block mean of a ``[C, H, W]`` array (float result)."""
    C, H, W = image_chw.shape
    return image_chw.reshape(C, H // rate, rate, W // rate, rate).mean(axis=(2, 4))
