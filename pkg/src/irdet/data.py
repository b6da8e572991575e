"""Synthetic infrared scenes, PGM image I/O, and normalized label files.

A scene is a grayscale float image in [0, 1]: a smooth background (value
noise octaves, a soft gradient, or both) plus faint Gaussian blobs standing
in for point-like warm targets.  Every blob satisfies two smallness
invariants by construction:

* its annotated box covers well under 0.5% of the image area,
* its peak rises at most 0.15 above the local background mean.

Labels use one ``class cx cy w h`` line per target with coordinates
normalized to [0, 1], matching the common text layout for detector
datasets.  Images are 8-bit binary PGM so everything stays inspectable
without an image library.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox
from .errors import ConfigError, GenerationError, InvalidArgumentError

MAX_CONTRAST = 0.15
MAX_AREA_FRACTION = 0.005
BACKGROUNDS = ("gradient", "clutter", "mixed")


@dataclass
class SceneConfig:
    image_size: int = 128
    targets_min: int = 1
    targets_max: int = 3
    size_min: float = 2.0
    size_max: float = 8.0
    intensity_min: float = 0.06
    intensity_max: float = 0.14
    background: str = "mixed"
    noise_sigma: float = 0.01
    seed: int = 0

    def validate(self):
        if self.image_size < 32 or self.image_size % 16:
            raise ConfigError(f"image_size must be a multiple of 16 and >= 32, got {self.image_size}")
        if not (1 <= self.targets_min <= self.targets_max):
            raise ConfigError("need 1 <= targets_min <= targets_max")
        if not (0.5 <= self.size_min <= self.size_max):
            raise ConfigError("need 0.5 <= size_min <= size_max")
        if self.size_max**2 / self.image_size**2 >= MAX_AREA_FRACTION:
            raise ConfigError(
                f"size_max {self.size_max} too large for image_size {self.image_size}: "
                f"targets must stay under {MAX_AREA_FRACTION:.1%} of the image area"
            )
        if not (0.0 < self.intensity_min <= self.intensity_max <= MAX_CONTRAST - 0.001):
            raise ConfigError(
                f"intensity range must lie in (0, {MAX_CONTRAST - 0.001}], got "
                f"[{self.intensity_min}, {self.intensity_max}]"
            )
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"background must be one of {BACKGROUNDS}, got '{self.background}'")
        if not (0.0 <= self.noise_sigma <= 0.05):
            raise ConfigError(f"noise_sigma must be in [0, 0.05], got {self.noise_sigma}")
        return self


@dataclass
class Sample:
    """One scene: image [1, H, W] float32 in [0, 1] plus (BBox, class) list."""

    image: np.ndarray
    boxes: list
    image_id: str = ""


def _bilinear_upsample(grid, size):
    """Resize a small 2-D grid to (size, size) with bilinear interpolation."""
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, size)
    xs = np.linspace(0, gw - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _value_noise(rng, size):
    """Sum of bilinear value-noise octaves with halving amplitude."""
    out = np.zeros((size, size), dtype=np.float64)
    amp = 1.0
    for cells in (4, 8, 16, 32):
        if cells >= size:
            break
        grid = rng.random((cells + 1, cells + 1))
        out += amp * _bilinear_upsample(grid, size)
        amp *= 0.5
    return out


def _gradient(rng, size):
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = xx * math.cos(theta) + yy * math.sin(theta)
    return ramp


def _normalize(img, lo, hi):
    mn, mx = img.min(), img.max()
    if mx - mn < 1e-9:
        return np.full_like(img, (lo + hi) / 2.0)
    return lo + (img - mn) * (hi - lo) / (mx - mn)


def generate_scene(cfg: SceneConfig, index: int) -> Sample:
    """Deterministic scene ``index`` for a config: rng seeded by (seed, index)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size

    if cfg.background == "gradient":
        bg = _gradient(rng, size)
    elif cfg.background == "clutter":
        bg = _value_noise(rng, size)
    else:
        bg = _value_noise(rng, size) + 0.8 * _gradient(rng, size)
    bg = _normalize(bg, 0.15, 0.55)
    if cfg.noise_sigma > 0:
        bg = bg + rng.normal(0.0, cfg.noise_sigma, bg.shape)
    img = np.clip(bg, 0.0, 1.0)

    n_targets = int(rng.integers(cfg.targets_min, cfg.targets_max + 1))
    boxes = []
    attempts = 0
    while len(boxes) < n_targets:
        attempts += 1
        if attempts > 200:
            raise GenerationError(
                f"could not place {n_targets} disjoint targets in scene {index} after 200 attempts"
            )
        t_size = float(rng.uniform(cfg.size_min, cfg.size_max))
        sigma = t_size / 4.0
        extent = math.ceil(3.0 * sigma)
        margin = extent / 2.0 + 2.0
        cx = float(rng.uniform(margin, size - margin))
        cy = float(rng.uniform(margin, size - margin))
        box = BBox(cx, cy, float(extent), float(extent))
        # Disjoint placement with 2 px of slack avoids ambiguous labels.
        padded = BBox(cx, cy, extent + 4.0, extent + 4.0)
        if any(_overlaps(padded, BBox(b.cx, b.cy, b.w + 4.0, b.h + 4.0)) for b, _ in boxes):
            continue

        # Peak contrast is defined against the local background mean in a
        # ring just outside the blob, measured before the blob is added.
        ring = _ring_mean(img, cx, cy, extent)
        contrast = float(rng.uniform(cfg.intensity_min, cfg.intensity_max))
        center_val = _bilinear_at(img, cx, cy)
        amplitude = ring + contrast - center_val
        if amplitude < 0.015:
            continue  # local bump too bright; try another spot
        img = _add_blob(img, cx, cy, sigma, amplitude)
        boxes.append((box, 0))

    img = np.clip(img, 0.0, 1.0)
    for box, _ in boxes:
        if box.area / size**2 >= MAX_AREA_FRACTION:
            raise GenerationError(f"target box {box} exceeds the area budget")
    return Sample(image=img.astype(np.float32)[None, :, :], boxes=boxes, image_id=f"img_{index:05d}")


def _overlaps(a: BBox, b: BBox) -> bool:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    return ax1 < bx2 and bx1 < ax2 and ay1 < by2 and by1 < ay2


def _bilinear_at(img, x, y):
    x0, y0 = int(x), int(y)
    x1 = min(x0 + 1, img.shape[1] - 1)
    y1 = min(y0 + 1, img.shape[0] - 1)
    fx, fy = x - x0, y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return float(top * (1 - fy) + bot * fy)


def _ring_mean(img, cx, cy, extent):
    """Mean intensity in a 2 px annulus just outside the target extent."""
    h, w = img.shape
    r_in = extent / 2.0
    r_out = r_in + 2.0
    y0 = max(0, int(cy - r_out - 1))
    y1 = min(h, int(cy + r_out + 2))
    x0 = max(0, int(cx - r_out - 1))
    x1 = min(w, int(cx + r_out + 2))
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
    mask = (d > r_in) & (d <= r_out)
    if not mask.any():
        return float(img[int(cy), int(cx)])
    return float(img[y0:y1, x0:x1][mask].mean())


def _add_blob(img, cx, cy, sigma, amplitude):
    h, w = img.shape
    r = int(math.ceil(4 * sigma)) + 1
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    blob = amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
    out = img.copy()
    out[y0:y1, x0:x1] += blob
    return out


def measured_contrast(sample: Sample, box: BBox) -> float:
    """Peak value inside the box minus the ring mean just outside it."""
    img = sample.image[0]
    x1, y1, x2, y2 = (int(round(v)) for v in box.corners())
    x1, y1 = max(0, x1), max(0, y1)
    x2 = min(img.shape[1], max(x2, x1 + 1))
    y2 = min(img.shape[0], max(y2, y1 + 1))
    peak = float(img[y1:y2, x1:x2].max())
    return peak - _ring_mean(img, box.cx, box.cy, max(box.w, box.h))


# ---------------------------------------------------------------------------
# PGM image I/O (8-bit binary, P5)


def write_pgm(path, image):
    """Write [1, H, W] or [H, W] float image in [0, 1] as binary PGM."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise InvalidArgumentError(f"expected single-channel image, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise InvalidArgumentError(f"expected 2-D image, got shape {arr.shape}")
    pixels = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path):
    """Read a binary PGM into a [1, H, W] float32 image in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # possibly with '#' comments.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise InvalidArgumentError(f"{path}: truncated PGM header")
        chunk = data[pos]
        if chunk in b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        if chr(chunk).isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not chr(data[end]).isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise InvalidArgumentError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise InvalidArgumentError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise InvalidArgumentError(f"{path}: expected {w * h} pixel bytes, got {len(raw)}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0
    return img[None, :, :]


# ---------------------------------------------------------------------------
# normalized label files


def format_labels(boxes, image_hw) -> str:
    h, w = image_hw
    lines = []
    for box, cls in boxes:
        x1, y1, x2, y2 = box.corners()
        if x1 < -1e-6 or y1 < -1e-6 or x2 > w + 1e-6 or y2 > h + 1e-6:
            raise InvalidArgumentError(f"box {box} extends outside the {w}x{h} image")
        lines.append(f"{cls} {box.cx / w:.6f} {box.cy / h:.6f} {box.w / w:.6f} {box.h / h:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_labels(text, image_hw):
    """Parse ``class cx cy w h`` lines back into pixel-space (BBox, class)."""
    h, w = image_hw
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise InvalidArgumentError(f"label line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, bw, bh = (float(p) for p in parts[1:])
        except ValueError as e:
            raise InvalidArgumentError(f"label line {lineno}: {e}") from e
        if cls < 0:
            raise InvalidArgumentError(f"label line {lineno}: negative class id")
        eps = 1e-4
        for v, name in ((cx, "cx"), (cy, "cy"), (bw, "w"), (bh, "h")):
            if not (0.0 <= v <= 1.0):
                raise InvalidArgumentError(f"label line {lineno}: {name}={v} outside [0, 1]")
        if cx - bw / 2 < -eps or cx + bw / 2 > 1 + eps or cy - bh / 2 < -eps or cy + bh / 2 > 1 + eps:
            raise InvalidArgumentError(f"label line {lineno}: box extends outside the unit square")
        out.append((BBox(cx * w, cy * h, bw * w, bh * h), cls))
    return out


# ---------------------------------------------------------------------------
# dataset layout: <root>/images/*.pgm, <root>/labels/*.txt, <root>/<split>.txt


def write_dataset(cfg: SceneConfig, root, train_count, val_count):
    """Generate and write a train/val dataset; returns (train, val) samples.

    Scene indices are global (train first), so changing the split sizes
    changes which scenes land where but never how scene ``i`` looks.
    """
    cfg.validate()
    img_dir = os.path.join(root, "images")
    lbl_dir = os.path.join(root, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lbl_dir, exist_ok=True)
    splits = {"train": range(train_count), "val": range(train_count, train_count + val_count)}
    out = {}
    for split, indices in splits.items():
        samples = []
        ids = []
        for i in indices:
            s = generate_scene(cfg, i)
            write_pgm(os.path.join(img_dir, f"{s.image_id}.pgm"), s.image)
            with open(os.path.join(lbl_dir, f"{s.image_id}.txt"), "w") as f:
                f.write(format_labels(s.boxes, (cfg.image_size, cfg.image_size)))
            samples.append(s)
            ids.append(s.image_id)
        with open(os.path.join(root, f"{split}.txt"), "w") as f:
            f.write("\n".join(ids) + "\n")
        out[split] = samples
    return out["train"], out["val"]


def load_split(root, split):
    """Load the samples listed in <root>/<split>.txt."""
    list_path = os.path.join(root, f"{split}.txt")
    if not os.path.exists(list_path):
        raise FileNotFoundError(list_path)
    with open(list_path) as f:
        ids = [line.strip() for line in f if line.strip()]
    samples = []
    for image_id in ids:
        img_path = os.path.join(root, "images", f"{image_id}.pgm")
        lbl_path = os.path.join(root, "labels", f"{image_id}.txt")
        if not os.path.exists(img_path):
            raise FileNotFoundError(img_path)
        image = read_pgm(img_path)
        h, w = image.shape[1:]
        if os.path.exists(lbl_path):
            with open(lbl_path) as f:
                boxes = parse_labels(f.read(), (h, w))
        else:
            boxes = []
        samples.append(Sample(image=image, boxes=boxes, image_id=image_id))
    return samples
