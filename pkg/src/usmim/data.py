"""Corpus I/O, synthetic speckle phantoms, augmentation and multi-crop views."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


class PGMError(ValueError):
    pass


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # float64 in [0, 1], [H, W]
    source: str = "corpus"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("grayscale images are 2-D")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError(f"pixels of {self.id} fall outside [0, 1]")


# ---------------------------------------------------------------- PGM


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise PGMError("truncated header")
        out.append(buf[i:j])
        i = j
    return out, i


def decode_pgm(buf: bytes) -> np.ndarray:
    """Binary 8-bit PGM bytes -> ``uint8 [H, W]``."""
    if buf[:2] != b"P5":
        raise PGMError("not a binary PGM (magic P5)")
    toks, i = _tokens(buf[2:], 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise PGMError("malformed header") from None
    if w <= 0 or h <= 0:
        raise PGMError("non-positive image size")
    if maxval != 255:
        raise PGMError(f"only maxval 255 is supported, got {maxval}")
    start = 2 + i + 1  # exactly one whitespace byte after maxval
    payload = buf[start : start + w * h]
    if len(payload) < w * h:
        raise PGMError(f"truncated payload: {len(payload)} of {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode() + arr.tobytes()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, pixels: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_pgm(pixels))
    os.replace(tmp, path)


def load_corpus(dir_path) -> Iterator[ImageRecord]:
    """Yield every decodable ``*.pgm`` under ``dir_path`` in lexicographic order."""
    for path in sorted(Path(dir_path).glob("*.pgm")):
        try:
            u8 = read_pgm(path)
        except (PGMError, OSError) as e:
            log.error("skipping %s: %s", path.name, e)
            continue
        yield ImageRecord(path.stem, u8.astype(np.float64) / 255.0, "corpus")


# ---------------------------------------------------------------- phantoms


@dataclass
class SpecklePhantomSpec:
    image_size: int = 128
    lesion_count: tuple[int, int] = (0, 3)
    contrast: tuple[float, float] = (-0.3, 0.3)  # additive echogenicity; negative = hypoechoic
    lesion_radius: tuple[float, float] = (0.08, 0.2)  # fraction of image size
    background: float = 0.35
    attenuation: float = 0.5  # echogenicity falls by exp(-attenuation) top to bottom
    speckle_grain: float = 1.0  # correlation width (pixels) of the complex scatterer field
    seed: int = 0

    def __post_init__(self):
        self.lesion_count = tuple(int(v) for v in self.lesion_count)
        self.contrast = tuple(float(v) for v in self.contrast)
        self.lesion_radius = tuple(float(v) for v in self.lesion_radius)


@dataclass
class Lesion:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    contrast: float

    def bbox(self) -> tuple[int, int, int, int]:
        r = max(self.ry, self.rx)
        return (int(math.floor(self.cy - r)), int(math.floor(self.cx - r)),
                int(math.ceil(self.cy + r)), int(math.ceil(self.cx + r)))

    def inside(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


def speckle_field(size: int, grain: float, rng: np.random.Generator) -> np.ndarray:
    """Rayleigh-distributed multiplicative speckle with unit mean."""
    re = rng.standard_normal((size, size))
    im = rng.standard_normal((size, size))
    if grain > 0:
        re = ndimage.gaussian_filter(re, grain, mode="wrap")
        im = ndimage.gaussian_filter(im, grain, mode="wrap")
        # restore unit variance per component so the magnitude stays Rayleigh(1)
        k = np.zeros((size, size))
        k[0, 0] = 1.0
        scale = math.sqrt((ndimage.gaussian_filter(k, grain, mode="wrap") ** 2).sum())
        re, im = re / scale, im / scale
    return np.hypot(re, im) / math.sqrt(math.pi / 2.0)


def phantom_echogenicity(spec: SpecklePhantomSpec, lesions: Sequence[Lesion]) -> np.ndarray:
    n = spec.image_size
    depth = np.linspace(0.0, 1.0, n)[:, None]
    field_ = np.broadcast_to(spec.background * np.exp(-spec.attenuation * depth), (n, n)).copy()
    for les in lesions:
        field_[les.inside(n)] += les.contrast
    return np.clip(field_, 0.0, None)


def synth_speckle(spec: SpecklePhantomSpec, image_id: str | None = None) -> ImageRecord:
    """Deterministic phantom for ``spec`` (its seed included); lesions recorded in ``meta``."""
    rng = np.random.default_rng(spec.seed)
    geo = np.random.default_rng([spec.seed, 1])
    n = spec.image_size
    lo, hi = spec.lesion_count
    count = int(geo.integers(lo, hi + 1))
    lesions = []
    for _ in range(count):
        r = geo.uniform(*spec.lesion_radius) * n
        aspect = geo.uniform(0.6, 1.0)
        cy = geo.uniform(r, n - r)
        cx = geo.uniform(r, n - r)
        angle = geo.uniform(0, math.pi)
        lesions.append(Lesion(cy, cx, r * aspect, r, angle, 0.0))
    # contrast drawn from its own stream so geometry does not depend on it
    cst = np.random.default_rng([spec.seed, 2])
    for les in lesions:
        les.contrast = float(cst.uniform(*spec.contrast))
    echo = phantom_echogenicity(spec, lesions)
    img = np.clip(echo * speckle_field(n, spec.speckle_grain, rng), 0.0, 1.0)
    meta = {
        "seed": spec.seed,
        "lesions": [asdict(les) for les in lesions],
        "bboxes": [les.bbox() for les in lesions],
    }
    return ImageRecord(image_id or f"synth_{spec.seed:06d}", img, "synthetic", meta)


def manifest_line(rec: ImageRecord) -> str:
    parts = [rec.id, str(rec.meta["seed"]), str(len(rec.meta["bboxes"]))]
    for box in rec.meta["bboxes"]:
        parts.extend(str(v) for v in box)
    return " ".join(parts)


def parse_manifest(path) -> dict[str, dict]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        f = line.split()
        count = int(f[2])
        boxes = [tuple(int(v) for v in f[3 + 4 * i : 7 + 4 * i]) for i in range(count)]
        out[f[0]] = {"seed": int(f[1]), "lesion_count": count, "bboxes": boxes}
    return out


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_jitter: float = 0.8
    p_blur: float = 0.5
    p_exposure: float = 0.5
    gain: tuple[float, float] = (0.7, 1.3)
    offset: tuple[float, float] = (-0.2, 0.2)
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    gamma: tuple[float, float] = (0.7, 1.4)

    def __post_init__(self):
        for name in ("gain", "offset", "blur_sigma", "gamma"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def jitter(img: np.ndarray, gain: float, offset: float) -> np.ndarray:
    return np.clip(gain * img + offset, 0.0, 1.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = int(math.ceil(2 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = ndimage.convolve1d(img, k, axis=0, mode="reflect")
    return np.clip(ndimage.convolve1d(out, k, axis=1, mode="reflect"), 0.0, 1.0)


def exposure(img: np.ndarray, gamma: float) -> np.ndarray:
    return np.clip(img, 0.0, 1.0) ** gamma


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Apply flip, jitter, blur and exposure, each with its own probability."""
    rec: dict = {}
    out = np.asarray(img, dtype=np.float64)
    # draw every coin and parameter unconditionally so streams stay aligned
    coins = rng.random(4)
    gain = rng.uniform(*cfg.gain)
    offset = rng.uniform(*cfg.offset)
    sigma = rng.uniform(*cfg.blur_sigma)
    gamma = rng.uniform(*cfg.gamma)
    if coins[0] < cfg.p_flip:
        out = hflip(out)
        rec["flip"] = True
    if coins[1] < cfg.p_jitter:
        out = jitter(out, gain, offset)
        rec["jitter"] = (gain, offset)
    if coins[2] < cfg.p_blur:
        out = gaussian_blur(out, sigma)
        rec["blur"] = sigma
    if coins[3] < cfg.p_exposure:
        out = exposure(out, gamma)
        rec["gamma"] = gamma
    return np.clip(out, 0.0, 1.0), rec


# ---------------------------------------------------------------- views


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Bilinear resample of ``box = (top, left, h, w)`` (default: whole image), pixel-centre aligned."""
    img = np.asarray(img, dtype=np.float64)
    top, left, h, w = box if box is not None else (0.0, 0.0, *img.shape)
    ys = top + (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, img.shape[0] - 1)
    xs = np.clip(xs, 0, img.shape[1] - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (a * (1 - wx) + b * wx) * (1 - wy) + (c * (1 - wx) + d * wx) * wy


def random_resized_box(h: int, w: int, scale: tuple[float, float], rng: np.random.Generator,
                       ratio: tuple[float, float] = (3 / 4, 4 / 3), attempts: int = 10):
    area = h * w
    for _ in range(attempts):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


@dataclass
class ViewConfig:
    n_global: int = 2
    n_local: int = 8
    global_size: int = 64
    local_size: int = 32
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.global_scale = tuple(float(v) for v in self.global_scale)
        self.local_scale = tuple(float(v) for v in self.local_scale)


@dataclass
class ViewBatch:
    source_id: str
    global_views: np.ndarray  # [G, S_g, S_g]
    local_views: np.ndarray  # [L, S_l, S_l]
    records: list[dict]


def make_views(image: np.ndarray | ImageRecord, cfg: ViewConfig, rng: np.random.Generator) -> ViewBatch:
    """Random-resized global and local crops, each augmented independently."""
    rec_id = image.id if isinstance(image, ImageRecord) else ""
    img = image.pixels if isinstance(image, ImageRecord) else np.asarray(image, dtype=np.float64)
    h, w = img.shape
    records = []

    def one(scale, size, kind):
        box = random_resized_box(h, w, scale, rng)
        view = resize_bilinear(img, size, size, box)
        view, aug = augment(view, cfg.augment, rng)
        records.append({"kind": kind, "box": box, **aug})
        return view

    g = [one(cfg.global_scale, cfg.global_size, "global") for _ in range(cfg.n_global)]
    loc = [one(cfg.local_scale, cfg.local_size, "local") for _ in range(cfg.n_local)]
    empty_l = np.zeros((0, cfg.local_size, cfg.local_size))
    return ViewBatch(rec_id, np.stack(g), np.stack(loc) if loc else empty_l, records)


def image_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def epoch_views(records: Sequence[ImageRecord], indices: Sequence[int], cfg: ViewConfig, seed: int,
                epoch: int, workers: int = 1) -> list[ViewBatch]:
    """Views for ``records[i]`` for each ``i`` in ``indices``, in that order, for any worker count."""

    def job(i):
        return make_views(records[i], cfg, image_rng(seed, epoch, i))

    if workers <= 1:
        return [job(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, indices))
