"""Histology patch pipeline on portable raster images.

Otsu tissue gating, fixed-size patch selection over a row-major grid, and
offline augmentation (color jitter + 90-degree rotations). Images are RGB
uint8 arrays of shape [height, width, 3]; PPM (P6) is the native format and
PNG is read through Pillow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# ITU-R 601 luma weights used for every grayscale conversion in this module
LUMA = np.array([0.299, 0.587, 0.114])


def check_rgb(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8 RGB of shape [h, w, 3], got "
                         f"{img.dtype} {img.shape}")
    return img


def grayscale(img: np.ndarray) -> np.ndarray:
    """Rounded luma (0.299 R + 0.587 G + 0.114 B) as uint8."""
    img = check_rgb(img)
    return np.rint(img.astype(np.float64) @ LUMA).clip(0, 255).astype(np.uint8)


def gray_histogram(img: np.ndarray) -> np.ndarray:
    return np.bincount(grayscale(img).ravel(), minlength=256)


def otsu_threshold(hist) -> tuple[int, bool]:
    """Threshold maximizing between-class variance over the split {<=t} vs {>t}.

    Comparisons run in exact integer arithmetic, so ties are mathematical ties
    and break toward the smallest t. A single-level histogram returns that
    level with the degenerate flag set.
    """
    counts = [int(c) for c in hist]
    if len(counts) != 256:
        raise ValueError(f"histogram must have 256 bins, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be non-negative")
    total = sum(counts)
    if total < 1:
        raise ValueError("histogram is empty")
    nonzero = [i for i, c in enumerate(counts) if c]
    if len(nonzero) == 1:
        return nonzero[0], True
    total_sum = sum(i * c for i, c in enumerate(counts))
    # sigma_b(t) is proportional to (s0*c1 - s1*c0)^2 / (c0*c1); compare the
    # fractions via cross-multiplication to stay exact
    best_t, best_num, best_den = 0, 0, 1
    c0 = s0 = 0
    for t in range(256):
        c0 += counts[t]
        s0 += t * counts[t]
        c1 = total - c0
        if c0 == 0 or c1 == 0:
            continue
        a = s0 * c1 - (total_sum - s0) * c0
        num, den = a * a, c0 * c1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t, False


@dataclass(frozen=True)
class PatchRecord:
    x: int
    y: int
    tissue_fraction: float

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "tissue_fraction": self.tissue_fraction}


@dataclass
class PatchManifest:
    image_id: str
    patch_size: int
    stride: int
    threshold: int
    degenerate: bool
    min_tissue_fraction: float
    accepted: list[PatchRecord] = field(default_factory=list)
    rejected: list[PatchRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "threshold": self.threshold,
            "degenerate": self.degenerate,
            "min_tissue_fraction": self.min_tissue_fraction,
            "accepted": [p.to_dict() for p in self.accepted],
            "rejected": [p.to_dict() for p in self.rejected],
        }


def extract_patches(img: np.ndarray, image_id: str = "", patch_size: int = 256,
                    stride: int = 256, min_tissue_fraction: float = 0.5) -> PatchManifest:
    """Gate a row-major patch grid on Otsu tissue content.

    Tissue pixels are those at or below the whole-image Otsu threshold (H&E
    tissue is darker than the glass background); a patch is accepted when its
    tissue fraction reaches ``min_tissue_fraction``. A degenerate threshold
    (single gray level: no contrast to split on) yields zero tissue.
    """
    img = check_rgb(img)
    h, w = img.shape[:2]
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {w}x{h} is smaller than patch size {patch_size}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    gray = grayscale(img)
    threshold, degenerate = otsu_threshold(np.bincount(gray.ravel(), minlength=256))
    if degenerate:
        log.warning("image %s: degenerate Otsu threshold (single gray level %d), "
                    "no tissue gate possible", image_id or "<unnamed>", threshold)
        tissue = np.zeros_like(gray, dtype=bool)
    else:
        tissue = gray <= threshold
    manifest = PatchManifest(image_id=image_id, patch_size=patch_size, stride=stride,
                             threshold=threshold, degenerate=degenerate,
                             min_tissue_fraction=min_tissue_fraction)
    area = patch_size * patch_size
    for y in range(0, h - patch_size + 1, stride):
        for x in range(0, w - patch_size + 1, stride):
            frac = int(tissue[y:y + patch_size, x:x + patch_size].sum()) / area
            rec = PatchRecord(x=x, y=y, tissue_fraction=frac)
            if frac >= min_tissue_fraction:
                manifest.accepted.append(rec)
            else:
                manifest.rejected.append(rec)
    return manifest


def crop_patch(img: np.ndarray, rec: PatchRecord, patch_size: int) -> np.ndarray:
    return img[rec.y:rec.y + patch_size, rec.x:rec.x + patch_size].copy()


def select_top_patches(manifest: PatchManifest, limit: int) -> list[PatchRecord]:
    """Top patches by tissue fraction, ties broken by grid (row-major) order."""
    ranked = sorted(enumerate(manifest.accepted),
                    key=lambda iv: (-iv[1].tissue_fraction, iv[0]))
    return [rec for _, rec in ranked[:limit]]


def apply_color_jitter(patch: np.ndarray, brightness: float = 1.0, contrast: float = 1.0,
                       saturation: float = 1.0, hue_shift: float = 0.0) -> np.ndarray:
    """Jitter with explicit factors, applied brightness -> contrast ->
    saturation -> hue, each stage clamped to [0, 255]."""
    v = check_rgb(patch).astype(np.float64)
    if brightness != 1.0:
        v = np.clip(v * brightness, 0.0, 255.0)
    if contrast != 1.0:
        mean_gray = float((v @ LUMA).mean())
        v = np.clip(mean_gray + (v - mean_gray) * contrast, 0.0, 255.0)
    if saturation != 1.0:
        gray = (v @ LUMA)[..., None]
        v = np.clip(gray + (v - gray) * saturation, 0.0, 255.0)
    if hue_shift != 0.0:
        hsv = _rgb_to_hsv(v / 255.0)
        hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
        v = np.clip(_hsv_to_rgb(hsv) * 255.0, 0.0, 255.0)
    return np.rint(v).clip(0, 255).astype(np.uint8)


def color_jitter(patch: np.ndarray, rng: np.random.Generator, brightness: float = 0.2,
                 contrast: float = 0.2, saturation: float = 0.2,
                 hue: float = 0.1) -> np.ndarray:
    """Random jitter: factors drawn uniformly from [1-x, 1+x] (hue from
    [-hue, +hue] as a fraction of the hue circle), draw order b, c, s, h."""
    for name, x in (("brightness", brightness), ("contrast", contrast),
                    ("saturation", saturation), ("hue", hue)):
        if not 0.0 <= x < 1.0:
            raise ValueError(f"{name} range must be in [0, 1), got {x}")
    b = rng.uniform(1.0 - brightness, 1.0 + brightness)
    c = rng.uniform(1.0 - contrast, 1.0 + contrast)
    s = rng.uniform(1.0 - saturation, 1.0 + saturation)
    h = rng.uniform(-hue, hue)
    return apply_color_jitter(patch, b, c, s, h)


def rotate90(patch: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Clockwise rotation by quarter_turns * 90 degrees; square patches only."""
    patch = check_rgb(patch, "patch")
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"rotation needs a square patch, got {patch.shape[1]}x{patch.shape[0]}")
    return np.ascontiguousarray(np.rot90(patch, k=-quarter_turns, axes=(0, 1)))


def random_rotate(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rotate90(patch, int(rng.integers(0, 4)))


def augment_patch(patch: np.ndarray, rng: np.random.Generator, **jitter_kwargs) -> np.ndarray:
    """Color jitter followed by a random 90-degree rotation."""
    return random_rotate(color_jitter(patch, rng, **jitter_kwargs), rng)


def patch_rng(run_seed: int, patch_index: int) -> np.random.Generator:
    """Per-patch stream (run_seed XOR patch index) so parallel augmentation is
    order-independent."""
    return np.random.default_rng(run_seed ^ patch_index)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV, all channels in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.zeros_like(maxc)
    rmax = (maxc == r) & (delta > 0)
    gmax = (maxc == g) & (delta > 0) & ~rmax
    bmax = (delta > 0) & ~rmax & ~gmax
    h = np.where(rmax, ((g - b) / safe) % 6.0, h)
    h = np.where(gmax, (b - r) / safe + 2.0, h)
    h = np.where(bmax, (r - g) / safe + 4.0, h)
    return np.stack([h / 6.0, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6), maxval 255."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:pos + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = check_rgb(img)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_image(path) -> np.ndarray:
    """PPM natively, anything else (PNG etc.) through Pillow, as RGB uint8."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
