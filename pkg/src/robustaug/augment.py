"""Augmentation operators with soft-label semantics.

All operators take an :class:`ImageBatch` and an :class:`RngStream`. Per-example
draws come from ``rng.generator(example_index)``; batch-level draws (partner
permutations) from ``rng.generator("batch")``. Mixing operators necessarily
depend on the batch through the partner; everything else is per-example.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .data import RngStream
from .errors import ConfigError, ValidationError


@dataclass
class ImageBatch:
    images: np.ndarray
    soft_labels: np.ndarray
    index: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
        if self.images.ndim != 4 or len(self.images) != len(self.soft_labels):
            raise ValidationError("ImageBatch needs (B,C,H,W) images and (B,K) labels")
        if self.index is None:
            self.index = np.arange(len(self.images))
        self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def hard_labels(self) -> np.ndarray:
        return self.soft_labels.argmax(axis=1)

    @classmethod
    def from_labels(cls, images, labels, num_classes: int, index=None) -> "ImageBatch":
        return cls(images, np.eye(num_classes)[np.asarray(labels)], index)

    def check(self, atol: float = 1e-9) -> None:
        """Assert the pixel-range and label-distribution invariants."""
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValidationError("pixels left [0, 1]")
        if (self.soft_labels < 0).any() or not np.allclose(self.soft_labels.sum(1), 1.0, atol=atol, rtol=0):
            raise ValidationError("label rows are not distributions")


@dataclass(frozen=True)
class Window:
    """Square or rectangular window by integer center; may overflow the image."""

    cy: int
    cx: int
    height: int
    width: int

    def bounds(self, H: int, W: int) -> tuple:
        y0 = self.cy - self.height // 2
        x0 = self.cx - self.width // 2
        return max(y0, 0), min(y0 + self.height, H), max(x0, 0), min(x0 + self.width, W)

    def area(self, H: int, W: int) -> int:
        y0, y1, x0, x1 = self.bounds(H, W)
        return max(y1 - y0, 0) * max(x1 - x0, 0)


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


def _sample_center(g: np.random.Generator, H: int, W: int) -> tuple:
    return int(g.integers(0, H)), int(g.integers(0, W))


# ---------------------------------------------------------------- pad & crop


def pad_crop_image(image: np.ndarray, pad: int, offset: tuple, flip: bool = False) -> np.ndarray:
    """Zero-pad by ``pad`` then crop (H, W) at ``offset`` in [0, 2*pad]^2."""
    C, H, W = image.shape
    oy, ox = offset
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad))) if pad else image
    out = padded[:, oy:oy + H, ox:ox + W]
    return out[:, :, ::-1].copy() if flip else out.copy()


def pad_and_crop(batch: ImageBatch, rng: RngStream, pad: int = 4, flip: bool = True) -> ImageBatch:
    if pad < 0:
        raise ValidationError("pad must be >= 0")
    out = np.empty_like(batch.images)
    for i, idx in enumerate(batch.index):
        g = rng.generator(idx)
        offset = tuple(int(v) for v in g.integers(0, 2 * pad + 1, size=2))
        do_flip = bool(g.random() < 0.5)
        out[i] = pad_crop_image(batch.images[i], pad, offset, flip and do_flip)
    return ImageBatch(out, batch.soft_labels.copy(), batch.index)


# ---------------------------------------------------------------- mixup


def mixup(batch: ImageBatch, rng: RngStream, alpha: float = 0.2, per_example: bool = True) -> ImageBatch:
    """x' = lam x_a + (1 - lam) x_b, same for labels; lam ~ Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValidationError("mixup alpha must be > 0")
    B = len(batch)
    if B < 2:
        raise ValidationError("mixup needs a batch of at least 2")
    gb = rng.generator("batch")
    perm = gb.permutation(B)
    if per_example:
        lam = np.array([rng.generator(idx).beta(alpha, alpha) for idx in batch.index])
    else:
        lam = np.full(B, gb.beta(alpha, alpha))
    return mix_pairs(batch, perm, lam)


def mix_pairs(batch: ImageBatch, partner: np.ndarray, lam: np.ndarray) -> ImageBatch:
    lam = np.asarray(lam, dtype=np.float64)
    x = lam[:, None, None, None] * batch.images + (1.0 - lam)[:, None, None, None] * batch.images[partner]
    y = lam[:, None] * batch.soft_labels + (1.0 - lam)[:, None] * batch.soft_labels[partner]
    return ImageBatch(np.clip(x, 0.0, 1.0), y, batch.index)


# ---------------------------------------------------------------- cutout


def cutout(batch: ImageBatch, rng: RngStream, fill: np.ndarray, window: int = 16) -> ImageBatch:
    """Fill a square window (center uniform in the image, may overflow) with ``fill``."""
    if window < 0:
        raise ValidationError("cutout window must be >= 0")
    fill = np.asarray(fill, dtype=np.float64)
    B, C, H, W = batch.images.shape
    if fill.shape != (C,):
        raise ValidationError(f"cutout fill needs {C} channel values")
    out = batch.images.copy()
    for i, idx in enumerate(batch.index):
        cy, cx = _sample_center(rng.generator(idx), H, W)
        y0, y1, x0, x1 = Window(cy, cx, window, window).bounds(H, W)
        out[i, :, y0:y1, x0:x1] = fill[:, None, None]
    return ImageBatch(out, batch.soft_labels.copy(), batch.index)


# ---------------------------------------------------------------- cutmix


def cutmix_compose(batch: ImageBatch, partner: np.ndarray, windows: Sequence[Window]) -> ImageBatch:
    """Paste partner[i]'s clipped window into image i; label weight = kept-area fraction."""
    B, C, H, W = batch.images.shape
    out = batch.images.copy()
    keep, pasted = np.empty(B), np.empty(B)
    for i, win in enumerate(windows):
        y0, y1, x0, x1 = win.bounds(H, W)
        out[i, :, y0:y1, x0:x1] = batch.images[partner[i], :, y0:y1, x0:x1]
        area = win.area(H, W)
        # both weights as exact fractions so the partner weight is the pasted fraction to the last bit
        keep[i], pasted[i] = (H * W - area) / (H * W), area / (H * W)
    y = keep[:, None] * batch.soft_labels + pasted[:, None] * batch.soft_labels[partner]
    return ImageBatch(out, y, batch.index)


def cutmix(batch: ImageBatch, rng: RngStream, alpha: float = 1.0, beta: float = 1.0,
           length: int | None = None) -> ImageBatch:
    """Square patch whose area ratio ~ Beta(alpha, beta), or fixed side ``length``."""
    B, C, H, W = batch.images.shape
    if B < 2:
        raise ValidationError("cutmix needs a batch of at least 2")
    partner = rng.generator("batch").permutation(B)
    windows = []
    for idx in batch.index:
        g = rng.generator(idx)
        r = g.beta(alpha, beta)
        side = _round(H * np.sqrt(r)) if length is None else int(length)
        cy, cx = _sample_center(g, H, W)
        windows.append(Window(cy, cx, side, side))
    return cutmix_compose(batch, partner, windows)


# ---------------------------------------------------------------- ricap


def ricap_compose(batch: ImageBatch, sources: np.ndarray, boundary: Sequence[tuple],
                  offsets: np.ndarray) -> ImageBatch:
    """Tile four crops around each example's boundary point.

    sources[i] = four batch positions (top-left, top-right, bottom-left,
    bottom-right); boundary[i] = (h, w); offsets[i, k] = crop origin inside
    source k. Label weights are the tile area fractions.
    """
    B, C, H, W = batch.images.shape
    out = np.empty_like(batch.images)
    y = np.zeros_like(batch.soft_labels)
    for i in range(B):
        h, w = boundary[i]
        tiles = _ricap_tiles(H, W, h, w)
        for k, (py, px, th, tw) in enumerate(tiles):
            src = sources[i][k]
            oy, ox = offsets[i][k]
            out[i, :, py:py + th, px:px + tw] = batch.images[src, :, oy:oy + th, ox:ox + tw]
            y[i] += (th * tw) / (H * W) * batch.soft_labels[src]
    return ImageBatch(out, y, batch.index)


def _ricap_tiles(H: int, W: int, h: int, w: int) -> list:
    return [(0, 0, h, w), (0, w, h, W - w), (h, 0, H - h, w), (h, w, H - h, W - w)]


def ricap_weights(H: int, W: int, h: int, w: int) -> np.ndarray:
    return np.array([th * tw / (H * W) for _, _, th, tw in _ricap_tiles(H, W, h, w)])


def ricap(batch: ImageBatch, rng: RngStream, beta: float = 0.3) -> ImageBatch:
    """Boundary (h, w) = round((H, W) * Beta(beta, beta)); tile 0 comes from the example itself."""
    B, C, H, W = batch.images.shape
    if B < 4:
        raise ValidationError("ricap needs a batch of at least 4")
    sources = np.empty((B, 4), dtype=np.int64)
    offsets = np.zeros((B, 4, 2), dtype=np.int64)
    boundary = []
    for i, idx in enumerate(batch.index):
        g = rng.generator(idx)
        h, w = _round(H * g.beta(beta, beta)), _round(W * g.beta(beta, beta))
        boundary.append((h, w))
        others = np.delete(np.arange(B), i)
        sources[i] = [i, *g.choice(others, size=3, replace=False)]
        for k, (_, _, th, tw) in enumerate(_ricap_tiles(H, W, h, w)):
            offsets[i, k] = g.integers(0, H - th + 1), g.integers(0, W - tw + 1)
    return ricap_compose(batch, sources, boundary, offsets)


# ---------------------------------------------------------------- RandAugment primitives

# op -> (parameter at magnitude M in [0, 10], description). Linear in M; signed ops
# draw a random sign. Translate is given for 32 px and scales with image width.
MAGNITUDE_TABLE = {
    "AutoContrast": (lambda M: None, "per-channel min/max stretch (no magnitude)"),
    "Equalize": (lambda M: None, "per-channel histogram equalization on 8-bit levels (no magnitude)"),
    "Invert": (lambda M: None, "x -> 1 - x (no magnitude)"),
    "Rotate": (lambda M: 30.0 * M / 10, "rotate +-30 deg * M/10 about the center, zero fill"),
    "Posterize": (lambda M: 8 - int(M * 4 / 10), "keep 8 - floor(4M/10) bits"),
    "Solarize": (lambda M: 1.0 - M / 10, "x -> 1 - x where x >= 1 - M/10"),
    "Color": (lambda M: 0.9 * M / 10, "saturation factor 1 +- 0.9 M/10"),
    "Contrast": (lambda M: 0.9 * M / 10, "contrast factor 1 +- 0.9 M/10"),
    "Brightness": (lambda M: 0.9 * M / 10, "brightness factor 1 +- 0.9 M/10"),
    "Sharpness": (lambda M: 0.9 * M / 10, "sharpness factor 1 +- 0.9 M/10"),
    "ShearX": (lambda M: 0.3 * M / 10, "horizontal shear +-0.3 M/10, zero fill"),
    "ShearY": (lambda M: 0.3 * M / 10, "vertical shear +-0.3 M/10, zero fill"),
    "TranslateX": (lambda M: 10.0 * M / 10, "shift +-10 px * M/10 at 32 px width (scaled), zero fill"),
    "TranslateY": (lambda M: 10.0 * M / 10, "shift +-10 px * M/10 at 32 px height (scaled), zero fill"),
    "SolarizeAdd": (lambda M: 110.0 / 255 * M / 10, "add 110/255 * M/10 to pixels below 128/255"),
}

FULL_POOL = tuple(MAGNITUDE_TABLE)
EXCLUDED_FROM_CURATED = ("Invert", "Posterize", "Solarize")
CURATED_POOL = tuple(op for op in FULL_POOL if op not in EXCLUDED_FROM_CURATED)
GEOMETRIC_OPS = ("Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY")


def describe_magnitudes() -> str:
    lines = [f"{'op':<13} {'M=0':>8} {'M=5':>8} {'M=10':>8}  meaning"]
    for op, (fn, text) in MAGNITUDE_TABLE.items():
        vals = [fn(m) for m in (0, 5, 10)]
        cells = ["-" if v is None else f"{v:.4g}" for v in vals]
        lines.append(f"{op:<13} {cells[0]:>8} {cells[1]:>8} {cells[2]:>8}  {text}")
    lines.append(f"curated pool drops: {', '.join(EXCLUDED_FROM_CURATED)}")
    return "\n".join(lines)


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def _blend(base: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    return base + factor * (img - base)


def _to_levels(img: np.ndarray) -> np.ndarray:
    return np.floor(img * 255 + 0.5).astype(np.int64)


def _equalize_channel(levels: np.ndarray) -> np.ndarray:
    hist = np.bincount(levels.ravel(), minlength=256)
    nonzero = hist[hist > 0]
    step = (hist.sum() - nonzero[-1]) // 255
    if step == 0:
        return levels / 255.0
    lut = np.minimum((np.cumsum(hist) - hist + step // 2) // step, 255)
    return lut[levels] / 255.0


def _affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    if np.array_equal(matrix, np.eye(2)) and not offset.any():
        return img.copy()
    m3 = np.eye(3)
    m3[1:, 1:] = matrix
    return ndimage.affine_transform(img, m3, offset=np.r_[0.0, offset], order=1, mode="constant", cval=0.0)


def _signed(value: float, g: np.random.Generator) -> float:
    return value if g.random() < 0.5 else -value


def apply_primitive(image: np.ndarray, op_name: str, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """One RandAugment op on a (C, H, W) image; output clipped to [0, 1]."""
    if op_name not in MAGNITUDE_TABLE:
        raise ValidationError(f"unknown augmentation op {op_name!r}")
    if not 0 <= magnitude <= 10:
        raise ValidationError("magnitude must lie in [0, 10]")
    param = MAGNITUDE_TABLE[op_name][0](magnitude)
    img = np.asarray(image, dtype=np.float64)
    C, H, W = img.shape
    if op_name == "AutoContrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        out = np.where(hi > lo, (img - lo) / span, img)
    elif op_name == "Equalize":
        out = np.stack([_equalize_channel(ch) for ch in _to_levels(img)])
    elif op_name == "Invert":
        out = 1.0 - img
    elif op_name == "Posterize":
        mask = (0xFF << (8 - param)) & 0xFF
        out = (_to_levels(img) & mask) / 255.0
    elif op_name == "Solarize":
        out = np.where(img >= param, 1.0 - img, img)
    elif op_name == "SolarizeAdd":
        out = np.where(img < 128 / 255, img + param, img)
    elif op_name in ("Color", "Contrast", "Brightness", "Sharpness"):
        factor = 1.0 + _signed(param, rng)
        if op_name == "Color":
            base = np.broadcast_to(_gray(img), img.shape)
        elif op_name == "Contrast":
            base = np.full_like(img, _gray(img).mean())
        elif op_name == "Brightness":
            base = np.zeros_like(img)
        else:
            kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13
            base = img.copy()
            for c in range(C):
                base[c, 1:-1, 1:-1] = ndimage.correlate(img[c], kernel, mode="nearest")[1:-1, 1:-1]
        out = _blend(base, img, factor)
    else:
        v = _signed(param, rng)
        if op_name == "Rotate":
            a = np.deg2rad(v)
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            center = np.array([(H - 1) / 2, (W - 1) / 2])
            matrix, offset = rot, center - rot @ center
        elif op_name == "ShearX":
            matrix, offset = np.array([[1.0, 0.0], [v, 1.0]]), np.zeros(2)
        elif op_name == "ShearY":
            matrix, offset = np.array([[1.0, v], [0.0, 1.0]]), np.zeros(2)
        elif op_name == "TranslateX":
            matrix, offset = np.eye(2), np.array([0.0, v * W / 32])
        else:
            matrix, offset = np.eye(2), np.array([v * H / 32, 0.0])
        if v == 0:
            matrix, offset = np.eye(2), np.zeros(2)
        out = _affine(img, matrix, offset)
    return np.clip(out, 0.0, 1.0)


def sample_ops(g: np.random.Generator, n: int, pool: Sequence[str]) -> list:
    """N ops drawn uniformly with replacement; exactly N integer draws."""
    return [pool[int(g.integers(len(pool)))] for _ in range(n)]


def rand_augment(batch: ImageBatch, rng: RngStream, n: int = 2, magnitude: float = 5, curated: bool = True,
                 pool: Sequence[str] | None = None) -> ImageBatch:
    if n < 1:
        raise ValidationError("RandAugment needs N >= 1")
    ops_pool = tuple(pool) if pool is not None else (CURATED_POOL if curated else FULL_POOL)
    unknown = [op for op in ops_pool if op not in MAGNITUDE_TABLE]
    if unknown:
        raise ValidationError(f"unknown ops in pool: {unknown}")
    out = np.empty_like(batch.images)
    for i, idx in enumerate(batch.index):
        ops = sample_ops(rng.generator(idx, "ops"), n, ops_pool)
        g = rng.generator(idx, "params")
        img = batch.images[i]
        for op in ops:
            img = apply_primitive(img, op, magnitude, g)
        out[i] = img
    return ImageBatch(out, batch.soft_labels.copy(), batch.index)


# ---------------------------------------------------------------- specs / pipeline

# kind -> allowed parameters with defaults
AUGMENT_KINDS = {
    "pad_crop": {"pad": 4, "flip": True},
    "mixup": {"alpha": 0.2, "per_example": True},
    "cutout": {"window": 16, "fill": None},
    "cutmix": {"alpha": 1.0, "beta": 1.0, "length": None},
    "ricap": {"beta": 0.3},
    "randaugment": {"n": 2, "magnitude": 5, "curated": True, "pool": None},
}

AUGMENT_ALIASES = {"padcrop": "pad_crop", "pad&crop": "pad_crop", "rand_augment": "randaugment"}


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = AUGMENT_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in AUGMENT_KINDS:
            raise ConfigError(f"unknown augmentation {self.kind!r}; expected one of {list(AUGMENT_KINDS)}")
        extra = set(self.params) - set(AUGMENT_KINDS[kind])
        if extra:
            raise ConfigError(f"unknown parameter(s) {sorted(extra)} for {kind}")
        merged = {**AUGMENT_KINDS[kind], **self.params}
        object.__setattr__(self, "params", merged)
        self._check_ranges(merged)

    def _check_ranges(self, p: dict) -> None:
        bad = (
            (self.kind == "pad_crop" and p["pad"] < 0)
            or (self.kind == "mixup" and p["alpha"] <= 0)
            or (self.kind == "cutout" and p["window"] < 0)
            or (self.kind == "cutmix" and (p["alpha"] <= 0 or p["beta"] <= 0
                                           or (p["length"] is not None and p["length"] < 0)))
            or (self.kind == "ricap" and p["beta"] <= 0)
            or (self.kind == "randaugment" and (p["n"] < 1 or not 0 <= p["magnitude"] <= 10))
        )
        if bad:
            raise ConfigError(f"parameter out of range in {self.kind}: {p}")

    @classmethod
    def parse(cls, item) -> "AugmentSpec":
        if isinstance(item, AugmentSpec):
            return item
        if isinstance(item, str):
            return cls(item)
        if isinstance(item, dict) and "kind" in item:
            return cls(item["kind"], {k: v for k, v in item.items() if k != "kind"})
        raise ConfigError(f"cannot parse augmentation spec {item!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


def apply_spec(batch: ImageBatch, spec: AugmentSpec, rng: RngStream, fill: np.ndarray | None = None) -> ImageBatch:
    p = spec.params
    if spec.kind == "pad_crop":
        return pad_and_crop(batch, rng, pad=p["pad"], flip=p["flip"])
    if spec.kind == "mixup":
        return mixup(batch, rng, alpha=p["alpha"], per_example=p["per_example"])
    if spec.kind == "cutout":
        f = p["fill"] if p["fill"] is not None else fill
        if f is None:
            raise ValidationError("cutout needs a fill value (dataset channel means)")
        return cutout(batch, rng, np.asarray(f, dtype=np.float64), window=p["window"])
    if spec.kind == "cutmix":
        return cutmix(batch, rng, alpha=p["alpha"], beta=p["beta"], length=p["length"])
    if spec.kind == "ricap":
        return ricap(batch, rng, beta=p["beta"])
    return rand_augment(batch, rng, n=p["n"], magnitude=p["magnitude"], curated=p["curated"], pool=p["pool"])


def pipeline(batch: ImageBatch, specs: Sequence, rng: RngStream, fill: np.ndarray | None = None) -> ImageBatch:
    """Apply specs in order; ``Pad & Crop + X`` is written [pad_crop, X]."""
    specs = [AugmentSpec.parse(s) for s in specs]
    if not specs:
        raise ValidationError("an augmentation pipeline needs at least one operator")
    for j, spec in enumerate(specs):
        batch = apply_spec(batch, spec, rng.child(j, spec.kind), fill)
    return batch


OPERATORS: dict[str, Callable] = {
    "pad_crop": pad_and_crop, "mixup": mixup, "cutout": cutout, "cutmix": cutmix, "ricap": ricap,
    "randaugment": rand_augment,
}
