"""Procedural QuintFeatures images.

Each image is a foreground shape filled with a coloured texture, composited
over a differently coloured and textured background. Parts of the foreground
are erased with Perlin noise and the colours are jittered inside their hue
class.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from matplotlib.path import Path as MplPath

from .seeding import mix_seed, rng_from

N_MANIFESTATIONS = 10
FACTORS = ("shape_id", "fg_color_id", "fg_texture_id", "bg_color_id", "bg_texture_id")

SHAPES = ("circle", "square", "star", "triangle", "pentagon",
          "hexagon", "diamond", "cross", "ring", "crescent")
TEXTURES = ("grid", "pulses", "noise", "triangles", "zigzags",
            "stripes", "dots", "checker", "waves", "bricks")
COLORS = ("red", "orange", "yellow", "lime", "green",
          "cyan", "azure", "blue", "purple", "pink")

HUE_STEP = 36.0
HUE_JITTER = 9.0
SV_RANGE = (0.7, 1.0)
ANCHOR_SV = 0.85
# fraction of the way towards the complementary shade on texture pixels; < 0.5 keeps the hue
TEXTURE_BLEND = 0.45
SIZE_RANGE = (0.4, 0.7)


@dataclass(frozen=True)
class QuintSpec:
    shape_id: int
    fg_color_id: int
    fg_texture_id: int
    bg_color_id: int
    bg_texture_id: int
    erosion_seed: int = 0
    jitter_seed: int = 0

    def __post_init__(self):
        for name in FACTORS:
            v = getattr(self, name)
            if not 0 <= v < N_MANIFESTATIONS:
                raise ValueError(f"{name}={v} outside [0, {N_MANIFESTATIONS})")
        if self.fg_color_id == self.bg_color_id:
            raise ValueError("foreground and background colour must differ")
        if self.fg_texture_id == self.bg_texture_id:
            raise ValueError("foreground and background texture must differ")

    def factors(self) -> tuple[int, ...]:
        return tuple(getattr(self, f) for f in FACTORS)

    def describe(self) -> dict:
        return {
            "shape": SHAPES[self.shape_id],
            "fg_color": COLORS[self.fg_color_id],
            "fg_texture": TEXTURES[self.fg_texture_id],
            "bg_color": COLORS[self.bg_color_id],
            "bg_texture": TEXTURES[self.bg_texture_id],
        }


@dataclass(frozen=True)
class ErosionConfig:
    frequency: float = 4.0
    octaves: int = 2
    threshold: float = -0.25


@dataclass(frozen=True)
class GenConfig:
    canvas: int = 64
    n_samples: int = 0
    seed: int = 0
    erosion: ErosionConfig = field(default_factory=ErosionConfig)

    def __post_init__(self):
        if self.canvas < 16:
            raise ValueError("canvas must be at least 16 pixels")
        if self.erosion.frequency <= 0:
            raise ValueError("erosion frequency must be positive")
        if self.erosion.octaves < 1:
            raise ValueError("erosion octaves must be >= 1")
        if not -1 <= self.erosion.threshold <= 1:
            raise ValueError("erosion threshold must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        d["erosion"] = ErosionConfig(**d.get("erosion", {}))
        return cls(**d)


@dataclass
class QuintImage:
    pixels: np.ndarray  # (canvas, canvas, 3) uint8
    spec: QuintSpec


# ------------------------------------------------------------------ Perlin noise

def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin_octave(w: int, h: int, freq_x: float, freq_y: float, rng: np.random.Generator) -> np.ndarray:
    gx_n = int(math.floor(freq_x)) + 2
    gy_n = int(math.floor(freq_y)) + 2
    angles = rng.uniform(0.0, 2 * math.pi, size=(gy_n, gx_n))
    grad = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    x = np.arange(w) * (freq_x / w)
    y = np.arange(h) * (freq_y / h)
    X, Y = np.meshgrid(x, y)
    x0 = np.floor(X).astype(int)
    y0 = np.floor(Y).astype(int)
    fx = X - x0
    fy = Y - y0

    def dot(ix, iy, dx, dy):
        g = grad[iy, ix]
        return g[..., 0] * dx + g[..., 1] * dy

    n00 = dot(x0, y0, fx, fy)
    n10 = dot(x0 + 1, y0, fx - 1, fy)
    n01 = dot(x0, y0 + 1, fx, fy - 1)
    n11 = dot(x0 + 1, y0 + 1, fx - 1, fy - 1)
    u = _fade(fx)
    v = _fade(fy)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return nx0 + v * (nx1 - nx0)


def perlin_field(w: int, h: int, frequency: float, octaves: int, seed: int) -> np.ndarray:
    """Classic 2-D gradient noise scaled into [-1, 1].

    ``frequency`` counts lattice cells across the field; each further octave
    doubles it and halves the amplitude.
    """
    if w < 1 or h < 1:
        raise ValueError("field extents must be >= 1")
    if frequency <= 0:
        raise ValueError("frequency must be positive")
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    rng = rng_from(seed)
    total = np.zeros((h, w))
    amp_sum = 0.0
    for k in range(octaves):
        amp = 0.5 ** k
        f = frequency * 2 ** k
        total += amp * _perlin_octave(w, h, f, f, rng)
        amp_sum += amp
    # |single octave| <= sqrt(2)/2 for unit gradients
    return np.clip(total * (math.sqrt(2.0) / amp_sum), -1.0, 1.0)


def erode(mask: np.ndarray, field: np.ndarray, threshold: float) -> np.ndarray:
    if mask.shape != field.shape:
        raise ValueError(f"mask {mask.shape} and field {field.shape} differ in extent")
    return mask & (field >= threshold)


# ----------------------------------------------------------------------- colours

def hsv_to_rgb(h_deg: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((h_deg % 360.0) / 360.0, s, v))


def jitter_hsv(color_id: int, jitter_seed: int) -> tuple[float, float, float]:
    if not 0 <= color_id < N_MANIFESTATIONS:
        raise ValueError(f"color_id {color_id} outside [0, {N_MANIFESTATIONS})")
    anchor = HUE_STEP * color_id
    if jitter_seed == 0:
        return anchor, ANCHOR_SV, ANCHOR_SV
    rng = rng_from(mix_seed(jitter_seed, color_id))
    hue = anchor + rng.uniform(-HUE_JITTER, HUE_JITTER)
    s, v = rng.uniform(*SV_RANGE, size=2)
    return hue % 360.0, float(s), float(v)


def jitter_color(color_id: int, jitter_seed: int) -> np.ndarray:
    """RGB in [0, 1] for a colour class; ``jitter_seed == 0`` yields the anchor."""
    return hsv_to_rgb(*jitter_hsv(color_id, jitter_seed))


def complementary(rgb: np.ndarray) -> np.ndarray:
    return rgb.max() + rgb.min() - rgb


def hue_of(rgb: np.ndarray) -> float:
    h, _, _ = colorsys.rgb_to_hsv(*[float(c) for c in rgb])
    return h * 360.0


def hue_class_distance(hue: float, color_id: int) -> float:
    d = abs(hue - HUE_STEP * color_id) % 360.0
    return min(d, 360.0 - d)


# ---------------------------------------------------------------------- textures

@lru_cache(maxsize=8)
def _texture_bank(canvas: int) -> np.ndarray:
    """All ten binary texture patterns at ``canvas`` resolution."""
    P = max(8, canvas // 4)
    y, x = np.mgrid[0:canvas, 0:canvas]
    xm, ym = x % P, y % P
    q = P / 4
    pats = np.zeros((N_MANIFESTATIONS, canvas, canvas), dtype=bool)
    pats[0] = (xm < q) | (ym < q)                                         # grid
    pats[1] = (ym < P / 2) & (xm < q)                                     # pulses
    cells = np.random.default_rng(0x9E3779B9).random((canvas // 4 + 1, canvas // 4 + 1)) < 0.4
    pats[2] = cells[y // 4, x // 4]                                       # noise
    pats[3] = xm < ym                                                     # triangles
    tri = np.abs(xm - P / 2) * 2 * (P / 2) / P                            # zigzags
    pats[4] = np.abs(ym - tri) < P / 6
    pats[5] = xm < P / 2                                                  # stripes
    pats[6] = (xm - P / 2 + 0.5) ** 2 + (ym - P / 2 + 0.5) ** 2 < (P / 4) ** 2  # dots
    pats[7] = ((x // (P // 2)) + (y // (P // 2))) % 2 == 0                # checker
    pats[8] = ((y + (P / 4) * np.sin(2 * np.pi * x / P)) % P) < P / 2     # waves
    row = y // (P // 2)
    pats[9] = ((y % (P // 2)) < 2) | (((x + (row % 2) * (P // 2)) % P) < 2)  # bricks
    pats.setflags(write=False)
    return pats


def texture_pattern(texture_id: int, canvas: int) -> np.ndarray:
    return _texture_bank(canvas)[texture_id]


def paint(pattern: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    """Fill a region with ``rgb``, pulling pattern pixels towards the complement."""
    shade = rgb + TEXTURE_BLEND * (complementary(rgb) - rgb)
    return np.where(pattern[..., None], shade, rgb)


# ------------------------------------------------------------------------ shapes

@lru_cache(maxsize=8)
def _grid(canvas: int) -> tuple[np.ndarray, np.ndarray]:
    c = (canvas - 1) / 2.0
    y, x = np.mgrid[0:canvas, 0:canvas].astype(float)
    return x - c, c - y


def _regular_polygon(n: int, r: float, inner: float | None = None, phase: float = 90.0) -> np.ndarray:
    pts = []
    step = 360.0 / n
    for k in range(n):
        a = math.radians(phase + k * step)
        pts.append((r * math.cos(a), r * math.sin(a)))
        if inner is not None:
            b = math.radians(phase + k * step + step / 2)
            pts.append((inner * math.cos(b), inner * math.sin(b)))
    return np.array(pts)


def _fit(poly: np.ndarray, r: float) -> np.ndarray:
    """Centre the polygon's bounding box and scale its larger side to 2r."""
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    return (poly - (lo + hi) / 2) * (2 * r / (hi - lo).max())


def _inside(poly: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    return MplPath(poly).contains_points(pts).reshape(x.shape)


def shape_mask(shape_id: int, canvas: int, size: float) -> np.ndarray:
    """Binary mask of a centred shape whose extent is ``size`` x canvas."""
    x, y = _grid(canvas)
    r = size * canvas / 2.0
    d = np.hypot(x, y)
    name = SHAPES[shape_id]
    if name == "circle":
        return d <= r
    if name == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= r
    if name == "star":
        return _inside(_fit(_regular_polygon(5, r, inner=0.42 * r), r), x, y)
    if name == "triangle":
        return _inside(_fit(_regular_polygon(3, r), r), x, y)
    if name == "pentagon":
        return _inside(_fit(_regular_polygon(5, r), r), x, y)
    if name == "hexagon":
        return _inside(_fit(_regular_polygon(6, r, phase=0.0), r), x, y)
    if name == "diamond":
        return np.abs(x) / (0.6 * r) + np.abs(y) / r <= 1.0
    if name == "cross":
        t = r / 3.0
        return ((np.abs(x) <= t) & (np.abs(y) <= r)) | ((np.abs(y) <= t) & (np.abs(x) <= r))
    if name == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if name == "crescent":
        return (d <= r) & (np.hypot(x - 0.5 * r, y) > 0.8 * r)
    raise ValueError(f"unknown shape id {shape_id}")


def shape_size(spec: QuintSpec) -> float:
    if spec.jitter_seed == 0:
        return sum(SIZE_RANGE) / 2
    return float(rng_from(mix_seed(spec.jitter_seed, 0x517E)).uniform(*SIZE_RANGE))


# ----------------------------------------------------------------------- render

def _bg_jitter_seed(jitter_seed: int) -> int:
    return 0 if jitter_seed == 0 else mix_seed(jitter_seed, 0xB6)


def foreground_mask(spec: QuintSpec, cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """(un-eroded mask, eroded mask)."""
    mask = shape_mask(spec.shape_id, cfg.canvas, shape_size(spec))
    e = cfg.erosion
    if e.threshold <= -1:
        return mask, mask
    field_ = perlin_field(cfg.canvas, cfg.canvas, e.frequency, e.octaves, spec.erosion_seed)
    return mask, erode(mask, field_, e.threshold)


def render(spec: QuintSpec, cfg: GenConfig) -> QuintImage:
    canvas = cfg.canvas
    fg_rgb = jitter_color(spec.fg_color_id, spec.jitter_seed)
    bg_rgb = jitter_color(spec.bg_color_id, _bg_jitter_seed(spec.jitter_seed))
    bg = paint(texture_pattern(spec.bg_texture_id, canvas), bg_rgb)
    fg = paint(texture_pattern(spec.fg_texture_id, canvas), fg_rgb)
    _, mask = foreground_mask(spec, cfg)
    img = np.where(mask[..., None], fg, bg)
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return QuintImage(pixels=pixels, spec=spec)


# ------------------------------------------------------------------- sampling

class Tie:
    """Constraint value meaning 'copy this factor from another spec'."""

    def __init__(self, other: QuintSpec):
        self.other = other


def sample_spec(constraints: dict | None, rng: np.random.Generator,
                erosion_seed: int = 0, jitter_seed: int = 0) -> QuintSpec:
    """Draw a spec; ``constraints`` maps factor names to an int or a :class:`Tie`.

    Free factors are uniform over the ten manifestations, with background
    colour/texture drawn from the values that differ from the foreground.
    """
    constraints = dict(constraints or {})
    unknown = set(constraints) - set(FACTORS)
    if unknown:
        raise ValueError(f"unknown factors {sorted(unknown)}")
    fixed: dict[str, int] = {}
    for name, v in constraints.items():
        fixed[name] = getattr(v.other, name) if isinstance(v, Tie) else int(v)
        if not 0 <= fixed[name] < N_MANIFESTATIONS:
            raise ValueError(f"{name}={fixed[name]} outside [0, {N_MANIFESTATIONS})")
    for fg, bg in (("fg_color_id", "bg_color_id"), ("fg_texture_id", "bg_texture_id")):
        if fg in fixed and bg in fixed and fixed[fg] == fixed[bg]:
            raise ValueError(f"contradictory constraints: {fg} == {bg} == {fixed[fg]}")

    out: dict[str, int] = {}
    # one draw per factor in a fixed order keeps streams aligned across constraint sets
    draws = rng.integers(0, N_MANIFESTATIONS, size=3)
    offsets = rng.integers(1, N_MANIFESTATIONS, size=2)
    out["shape_id"] = fixed.get("shape_id", int(draws[0]))
    for k, (fg, bg) in enumerate((("fg_color_id", "bg_color_id"), ("fg_texture_id", "bg_texture_id"))):
        if fg in fixed:
            out[fg] = fixed[fg]
            out[bg] = fixed.get(bg, (out[fg] + int(offsets[k])) % N_MANIFESTATIONS)
        elif bg in fixed:
            out[bg] = fixed[bg]
            out[fg] = (out[bg] + int(offsets[k])) % N_MANIFESTATIONS
        else:
            out[fg] = int(draws[k + 1])
            out[bg] = (out[fg] + int(offsets[k])) % N_MANIFESTATIONS
    return QuintSpec(erosion_seed=erosion_seed, jitter_seed=jitter_seed, **out)


def spec_seeds(dataset_seed: int, partition: str, index: int, modality: int) -> tuple[int, int]:
    base = mix_seed(dataset_seed, partition, index, modality)
    return mix_seed(base, "erosion"), mix_seed(base, "jitter")


def downscale(pixels: np.ndarray, side: int) -> np.ndarray:
    """Box-filter a stack of (..., H, W, C) images to ``side`` x ``side``."""
    h, w = pixels.shape[-3], pixels.shape[-2]
    if h == side and w == side:
        return pixels.astype(np.float32)
    if h % side == 0 and w % side == 0:
        fh, fw = h // side, w // side
        shp = pixels.shape[:-3] + (side, fh, side, fw, pixels.shape[-1])
        return pixels.reshape(shp).mean(axis=(-4, -2), dtype=np.float32)
    from PIL import Image

    flat = pixels.reshape((-1, h, w, pixels.shape[-1]))
    out = np.empty((len(flat), side, side, pixels.shape[-1]), dtype=np.float32)
    for i, im in enumerate(flat):
        for c in range(im.shape[-1]):
            out[i, :, :, c] = np.asarray(
                Image.fromarray(im[:, :, c].astype(np.float32)).resize((side, side), Image.BOX))
    return out.reshape(pixels.shape[:-3] + (side, side, pixels.shape[-1]))


def save_png(image: QuintImage | np.ndarray, path) -> None:
    from PIL import Image

    pixels = image.pixels if isinstance(image, QuintImage) else image
    Image.fromarray(np.squeeze(pixels) if pixels.shape[-1] == 1 else pixels).save(path, format="PNG")
