"""Deterministic synthetic slide pyramids.

The finest level is painted cell by cell. A cell is the footprint of one
coarsest-level pixel (``rate ** (levels - 1)`` finest pixels on a side). Every
tissue cell receives a fixed number of dark "nuclei" pixels (its ink) in a
class-specific arrangement:

* ``scatter``: one dot per sub-block, at a random spot inside it
* ``cluster``: all dots packed into one random sub-block
* ``line``: dots in a horizontal run on a random row

Classes with equal ink are identical after area-averaging to the coarsest
level, yet differ one level up, where sub-blocks become single pixels.

A texture may also carry a lumen lattice: empty, glass-coloured squares of
``lumen_size`` cells repeating every ``lumen_period`` cells in slide
coordinates. A class may also have a second appearance (``variants``), used on
a smooth random share of the cells. Default benign tissue has
lumens throughout; between them it looks either like normal tissue (told apart
only from a window wide enough to hold a lumen, which a coarse patch spanning
a full period always is and a zoomed child often is not) or like carcinoma
with the ink in a line (identical to carcinoma at the coarsest level, distinct
one level up). Coarser levels are exact block means of the finest float image;
coarse labels are majority votes of the next-finer labels.

Each finest tile draws from its own Philox stream keyed by ``(seed, tile)``, so
rendering order (and worker count) cannot change the output bytes.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .pyramid import PyramidDataset, PyramidWriter, label_downsample

log = logging.getLogger(__name__)

LAYOUTS = ("scatter", "cluster", "line")


@dataclass
class Texture:
    ink: int
    layout: str = "scatter"
    lumen_period: int = 0
    lumen_size: int = 0


def _default_textures() -> dict[int, Texture]:
    return {
        0: Texture(1, "scatter"),
        1: Texture(1, "scatter", lumen_period=64, lumen_size=8),
        2: Texture(4, "cluster"),
        3: Texture(4, "scatter"),
    }


def _default_variants() -> dict[int, Texture]:
    return {1: Texture(4, "line", lumen_period=64, lumen_size=8)}


@dataclass
class SynthSpec:
    seed: int = 7
    size: tuple[int, int] = (4096, 4096)
    levels: int = 3
    rate: int = 2
    tile_size: int = 256
    tissue_fraction: float = 0.55
    # normal tissue, benign, in situ, invasive (glass makes up the rest of class 0)
    class_area: tuple[float, ...] = (0.30, 0.12, 0.06, 0.07)
    textures: dict[int, Texture] = field(default_factory=_default_textures)
    # alternative appearance per class, used on a smooth random share of the cells
    variants: dict[int, Texture] = field(default_factory=_default_variants)
    variant_grain: float = 8.0
    variant_share: float = 1 / 3
    cell: int | None = None
    roi_radius: tuple[int, int] = (100, 300)
    # >0: carcinoma ROIs are a patchwork of classes 2 and 3 with this blob scale (cells)
    subtype_grain: float = 4.0
    label_noise: int = 2
    noise_sigma: float = 3.0
    glass_rgb: tuple[int, int, int] = (242, 242, 245)
    stroma_rgb: tuple[int, int, int] = (232, 176, 206)
    nuclei_rgb: tuple[int, int, int] = (84, 40, 132)

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.class_area = tuple(float(a) for a in self.class_area)
        self.roi_radius = tuple(int(r) for r in self.roi_radius)
        self.textures = {
            int(k): (v if isinstance(v, Texture) else Texture(**v)) for k, v in self.textures.items()
        }
        self.variants = {
            int(k): (v if isinstance(v, Texture) else Texture(**v)) for k, v in self.variants.items()
        }
        self.validate()

    @property
    def cell_size(self) -> int:
        return self.cell or self.rate ** (self.levels - 1)

    def level_dims(self) -> list[tuple[int, int]]:
        H, W = self.size
        f = self.rate ** (self.levels - 1)
        return [(H // f * self.rate**lvl, W // f * self.rate**lvl) for lvl in range(self.levels)]

    def validate(self) -> None:
        H, W = self.size
        if self.levels < 1 or self.rate < 1:
            raise ConfigError("levels and rate must be positive")
        f = self.rate ** (self.levels - 1)
        if H % f or W % f:
            raise ConfigError(f"size {H}x{W} not divisible by rate**(levels-1) = {f}")
        if H % self.tile_size or W % self.tile_size:
            raise ConfigError(f"size {H}x{W} not divisible by tile_size {self.tile_size}")
        c = self.cell_size
        if H % c or W % c or self.tile_size % c:
            raise ConfigError(f"cell size {c} must divide the image and tile size")
        if c % self.rate:
            raise ConfigError(f"cell size {c} must be a multiple of rate {self.rate}")
        if not 0.0 <= self.tissue_fraction <= 1.0:
            raise ConfigError("tissue_fraction must lie in [0, 1]")
        if len(self.class_area) != 4 or min(self.class_area) < 0:
            raise ConfigError("class_area needs four non-negative entries")
        if abs(sum(self.class_area) - self.tissue_fraction) > 1e-6:
            raise ConfigError(
                f"class_area sums to {sum(self.class_area):.6f}, expected tissue_fraction {self.tissue_fraction}"
            )
        if sorted(self.textures) != [0, 1, 2, 3]:
            raise ConfigError("textures must be given for classes 0..3")
        sub = c // self.rate
        if not set(self.variants) <= {0, 1, 2, 3}:
            raise ConfigError("variants may only be given for classes 0..3")
        if self.variants and self.variant_grain <= 0:
            raise ConfigError("variant_grain must be positive")
        if not 0.0 <= self.variant_share <= 1.0:
            raise ConfigError("variant_share must lie in [0, 1]")
        for k, t in [*self.textures.items(), *self.variants.items()]:
            if t.layout not in LAYOUTS:
                raise ConfigError(f"class {k}: unknown layout {t.layout!r}")
            limit = {"scatter": self.rate**2, "cluster": sub * sub, "line": c}[t.layout]
            if not 0 <= t.ink <= limit:
                raise ConfigError(f"class {k}: ink {t.ink} impossible for layout {t.layout!r} (max {limit})")
            if t.lumen_period < 0 or not 0 <= t.lumen_size <= t.lumen_period:
                raise ConfigError(f"class {k}: need 0 <= lumen_size <= lumen_period")
        if self.textures[2].ink != self.textures[3].ink:
            raise ConfigError("classes 2 and 3 must share ink per cell so they coincide at the coarsest level")
        lo, hi = self.roi_radius
        if not 0 < lo <= hi:
            raise ConfigError("roi_radius must satisfy 0 < min <= max")
        if self.subtype_grain < 0:
            raise ConfigError("subtype_grain must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["textures"] = {str(k): asdict(v) for k, v in self.textures.items()}
        d["variants"] = {str(k): asdict(v) for k, v in self.variants.items()}
        return d


def spec_from_dict(d: dict) -> SynthSpec:
    known = set(SynthSpec.__dataclass_fields__)
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown spec field(s): {', '.join(unknown)}")
    return SynthSpec(**d)


# ------------------------------------------------------------------- regions


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _tissue_mask(spec: SynthSpec, hc: int, wc: int) -> np.ndarray:
    if spec.tissue_fraction <= 0:
        return np.zeros((hc, wc), dtype=bool)
    if spec.tissue_fraction >= 1:
        return np.ones((hc, wc), dtype=bool)
    rng = _stream(spec.seed, 0)
    coarse = rng.normal(size=(12, 12))
    field_ = ndimage.zoom(coarse, (hc / 12, wc / 12), order=3)[:hc, :wc]
    field_ = ndimage.gaussian_filter(field_, sigma=max(hc, wc) / 64)
    thresh = np.quantile(field_, 1.0 - spec.tissue_fraction)
    return field_ > thresh


def _roi_groups(spec: SynthSpec) -> list[tuple[int, ...]]:
    return [(1,), (2, 3)] if spec.subtype_grain > 0 else [(1,), (2,), (3,)]


def _paint_rois(spec: SynthSpec, tissue: np.ndarray) -> np.ndarray:
    """Cell-resolution class map: 0 outside ROIs, 1..3 inside."""
    hc, wc = tissue.shape
    c = spec.cell_size
    cls = np.zeros((hc, wc), dtype=np.uint8)
    rng = _stream(spec.seed, 1)
    total = hc * wc
    lo, hi = (r / c for r in spec.roi_radius)
    for group in _roi_groups(spec):
        k = group[0]
        target = int(round(sum(spec.class_area[g] for g in group) * total))
        painted = 0
        for _ in range(10000):
            if painted >= target:
                break
            free = tissue & (cls == 0)
            n_free = int(free.sum())
            if n_free == 0:
                break
            pick = int(rng.integers(n_free))
            cy, cx = np.argwhere(free)[pick]
            ry = rng.uniform(lo, hi)
            rx = ry * rng.uniform(0.6, 1.0)
            theta = rng.uniform(0, np.pi)
            R = int(np.ceil(max(ry, rx))) + 1
            y0, y1 = max(0, cy - R), min(hc, cy + R + 1)
            x0, x1 = max(0, cx - R), min(wc, cx + R + 1)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            dy, dx = yy - cy, xx - cx
            u = dy * np.cos(theta) + dx * np.sin(theta)
            v = -dy * np.sin(theta) + dx * np.cos(theta)
            blob = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
            blob &= free[y0:y1, x0:x1]
            # trim the final blob so the class lands near its target area
            need = target - painted
            n_blob = int(blob.sum())
            if n_blob > need:
                d2 = ((u / ry) ** 2 + (v / rx) ** 2)[blob]
                keep = np.sort(d2)[need - 1]
                blob &= ((u / ry) ** 2 + (v / rx) ** 2) <= keep
            cls[y0:y1, x0:x1][blob] = k
            painted += int(blob.sum())
    if spec.subtype_grain > 0:
        _split_subtypes(spec, cls)
    return cls


def _split_subtypes(spec: SynthSpec, cls: np.ndarray) -> None:
    """Relabel carcinoma cells as 2 or 3 by thresholding a smooth random field."""
    roi = cls == 2
    n = int(roi.sum())
    if n == 0:
        return
    noise = _stream(spec.seed, 4).normal(size=cls.shape)
    field_ = ndimage.gaussian_filter(noise, sigma=spec.subtype_grain)[roi]
    a2, a3 = spec.class_area[2], spec.class_area[3]
    n2 = int(round(n * a2 / (a2 + a3))) if a2 + a3 > 0 else 0
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(field_, kind="stable")] = np.arange(n)
    cls[roi] = np.where(rank < n2, 2, 3).astype(np.uint8)


def _variant_cells(spec: SynthSpec, hc: int, wc: int) -> np.ndarray:
    """Cells drawn with the class variant: the top ``variant_share`` of a smooth random field."""
    if not spec.variants or spec.variant_share <= 0:
        return np.zeros((hc, wc), dtype=bool)
    noise = _stream(spec.seed, 5).normal(size=(hc, wc))
    field_ = ndimage.gaussian_filter(noise, sigma=spec.variant_grain)
    return field_ > np.quantile(field_, 1.0 - spec.variant_share)


def _noisy_labels(spec: SynthSpec, cell_cls: np.ndarray) -> np.ndarray:
    """Finest-level annotation: true regions with random per-region boundary jitter."""
    c = spec.cell_size
    labels = np.repeat(np.repeat(cell_cls, c, axis=0), c, axis=1)
    j = spec.label_noise
    if j <= 0:
        return labels
    rng = _stream(spec.seed, 2)
    H, W = labels.shape
    for group in _roi_groups(spec):
        comps, n = ndimage.label(np.isin(cell_cls, group))
        for idx, sl in enumerate(ndimage.find_objects(comps), start=1):
            amount = int(rng.integers(1, j + 1))
            grow = bool(rng.integers(2))
            y0 = max(0, sl[0].start * c - j)
            y1 = min(H, sl[0].stop * c + j)
            x0 = max(0, sl[1].start * c - j)
            x1 = min(W, sl[1].stop * c + j)
            cy0, cx0 = y0 // c, x0 // c
            cells = (slice(cy0, -(-y1 // c)), slice(cx0, -(-x1 // c)))
            oy, ox = y0 - cy0 * c, x0 - cx0 * c

            def to_px(m):
                m = np.repeat(np.repeat(m, c, axis=0), c, axis=1)
                return m[oy : oy + (y1 - y0), ox : ox + (x1 - x0)]

            comp = to_px(comps[cells] == idx)
            win = labels[y0:y1, x0:x1]
            if grow:
                ring = ndimage.binary_dilation(comp, iterations=amount) & ~comp & (win == 0)
                # grown pixels copy the nearest region pixel, so subtypes extend outward
                _, (iy, ix) = ndimage.distance_transform_edt(~comp, return_indices=True)
                win[ring] = win[iy[ring], ix[ring]]
            else:
                # retreat only from background, never from a neighbouring ROI
                roi = to_px(cell_cls[cells] > 0)
                ring = comp & ~ndimage.binary_erosion(roi, iterations=amount, border_value=1)
                win[ring & np.isin(win, group)] = 0
    return labels


# ------------------------------------------------------------------ textures


def _layout_dark(layout: str, ink: int, ny: int, nx: int, c: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``[ny, c, nx, c]`` dot mask for a grid of cells."""
    dark = np.zeros((ny, c, nx, c), dtype=bool)
    sub = c // rate
    cy, cx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    if layout == "scatter":
        order = np.argsort(rng.random((ny, nx, rate * rate)), axis=-1)[..., :ink]
        pos = rng.integers(0, sub, size=(ny, nx, ink, 2))
        py = (order // rate) * sub + pos[..., 0]
        px = (order % rate) * sub + pos[..., 1]
        dark[cy[..., None], py, cx[..., None], px] = True
    elif layout == "cluster":
        block = rng.integers(0, rate * rate, size=(ny, nx))
        k = np.arange(ink)
        py = (block // rate)[..., None] * sub + k // sub
        px = (block % rate)[..., None] * sub + k % sub
        dark[cy[..., None], py, cx[..., None], px] = True
    elif layout == "line":
        row = rng.integers(0, c, size=(ny, nx))
        start = rng.integers(0, c - ink + 1, size=(ny, nx))
        k = np.arange(ink)
        py = np.broadcast_to(row[..., None], (ny, nx, ink))
        px = start[..., None] + k
        dark[cy[..., None], py, cx[..., None], px] = True
    return dark


def _render_tile(
    spec: SynthSpec, ty: int, tx: int, tissue: np.ndarray, cell_cls: np.ndarray, variant: np.ndarray
) -> np.ndarray:
    """Float ``[ts, ts, 3]`` finest-level tile."""
    ts, c = spec.tile_size, spec.cell_size
    n = ts // c
    rng = _stream(spec.seed, 3, ty, tx)
    sl = (slice(ty * n, (ty + 1) * n), slice(tx * n, (tx + 1) * n))
    t_cells, k_cells, v_cells = tissue[sl], cell_cls[sl], variant[sl]
    dark = np.zeros((n, c, n, c), dtype=bool)
    open_cells = np.zeros((n, n), dtype=bool)
    gy, gx = np.meshgrid(np.arange(ty * n, (ty + 1) * n), np.arange(tx * n, (tx + 1) * n), indexing="ij")
    everywhere = np.ones_like(v_cells)
    looks = [(k, spec.textures[k], ~v_cells if k in spec.variants else everywhere) for k in range(4)]
    looks += [(k, tex, v_cells) for k, tex in sorted(spec.variants.items())]
    for k, tex, where in looks:
        layer = _layout_dark(tex.layout, tex.ink, n, n, c, spec.rate, rng)
        sel = t_cells & (k_cells == k) & where
        if tex.lumen_period and tex.lumen_size:
            lumen = (gy % tex.lumen_period < tex.lumen_size) & (gx % tex.lumen_period < tex.lumen_size)
            open_cells |= sel & lumen
        dark |= layer & sel[:, None, :, None]
    dark = dark.reshape(ts, ts)
    tissue_px = np.repeat(np.repeat(t_cells & ~open_cells, c, axis=0), c, axis=1)
    glass = np.asarray(spec.glass_rgb, dtype=np.float64)
    stroma = np.asarray(spec.stroma_rgb, dtype=np.float64)
    nuclei = np.asarray(spec.nuclei_rgb, dtype=np.float64)
    img = np.where(tissue_px[..., None], np.where(dark[..., None], nuclei, stroma), glass)
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return img


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def generate(spec: SynthSpec, out_dir, workers: int = 1) -> PyramidDataset:
    """Render ``spec`` into a pyramid under ``out_dir`` and return it opened."""
    spec.validate()
    out_dir = Path(out_dir)
    H, W = spec.size
    c, ts, r, L = spec.cell_size, spec.tile_size, spec.rate, spec.levels
    hc, wc = H // c, W // c
    tissue = _tissue_mask(spec, hc, wc)
    cell_cls = _paint_rois(spec, tissue)
    fine_labels = _noisy_labels(spec, cell_cls)
    variant = _variant_cells(spec, hc, wc)

    tiles = [(ty, tx) for ty in range(H // ts) for tx in range(W // ts)]
    finest = np.empty((H, W, 3), dtype=np.float32)

    def render(t):
        ty, tx = t
        finest[ty * ts : (ty + 1) * ts, tx * ts : (tx + 1) * ts] = _render_tile(spec, ty, tx, tissue, cell_cls, variant)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(render, tiles))
    else:
        for t in tiles:
            render(t)

    dims = spec.level_dims()
    writer = PyramidWriter(out_dir, dims, r, ts, meta={"seed": spec.seed, "generator": spec.to_dict()})
    labels = fine_labels
    image = finest
    for lvl in range(L - 1, -1, -1):
        if lvl < L - 1:
            Hl, Wl = dims[lvl]
            f = r ** (L - 1 - lvl)
            image = finest.reshape(Hl, f, Wl, f, 3).mean(axis=(1, 3), dtype=np.float64)
            labels = label_downsample(labels, r, 4)
        img_u8 = _to_u8(image)
        for ty, tx, ref in writer.tiles(lvl):
            ys, xs = slice(ref.row, ref.row + ref.height), slice(ref.col, ref.col + ref.width)
            writer.write_tile(lvl, ty, tx, img_u8[ys, xs], labels[ys, xs])
        log.info("wrote level %d (%dx%d)", lvl, *dims[lvl])
    return writer.finish()


# -------------------------------------------------------------- separability


def _window_stats(gray: np.ndarray, mask: np.ndarray, w: int) -> np.ndarray:
    H, W = gray.shape
    H2, W2 = H // w * w, W // w * w
    g = gray[:H2, :W2].reshape(H2 // w, w, W2 // w, w).mean(axis=(1, 3))
    m = mask[:H2, :W2].reshape(H2 // w, w, W2 // w, w).all(axis=(1, 3))
    return g[m]


def confusability_report(
    ds: PyramidDataset,
    classes: tuple[int, int] = (2, 3),
    window_sizes: tuple[int, ...] = (1, 2),
    bins: int = 32,
    erode: int = 2,
) -> dict:
    """Per-level separability of two classes' local dot-count statistics.

    For each level and window size, non-overlapping windows lying inside a
    class (after eroding its mask by ``erode`` pixels) contribute their mean
    darkness; the score is the largest total-variation distance between the
    two classes' histograms. Levels where a class is absent get ``None``.
    """
    a, b = classes
    scores: dict[int, float | None] = {}
    notices: list[str] = []
    edges = np.linspace(0.0, 1.0, bins + 1)
    for lvl in range(ds.levels):
        img, lab = ds.read_patch(ds.full_ref(lvl))
        dark = 1.0 - img.astype(np.float64).mean(axis=0) / 255.0
        masks = []
        for k in (a, b):
            m = lab == k
            if erode:
                m = ndimage.binary_erosion(m, iterations=erode)
            masks.append(m)
        if not masks[0].any() or not masks[1].any():
            missing = a if not masks[0].any() else b
            msg = f"level {lvl}: class {missing} absent, score omitted"
            notices.append(msg)
            warnings.warn(msg, stacklevel=2)
            scores[lvl] = None
            continue
        best = 0.0
        for w in window_sizes:
            sa, sb = _window_stats(dark, masks[0], w), _window_stats(dark, masks[1], w)
            if sa.size == 0 or sb.size == 0:
                continue
            ha = np.histogram(sa, edges)[0] / sa.size
            hb = np.histogram(sb, edges)[0] / sb.size
            best = max(best, 0.5 * float(np.abs(ha - hb).sum()))
        scores[lvl] = best
    return {"classes": list(classes), "scores": scores, "notices": notices}
