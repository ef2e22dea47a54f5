"""Paired-view image augmentation (crop/resize, flip, jitter, blur, solarize).

Images are HWC float arrays in [0, 1]; views come out CHW float32. The two
pipelines T and T' share every parameter except the blur and solarize
probabilities, mirroring the usual BYOL recipe.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


@dataclass
class AugmentationPolicy:
    output_size: int = 224
    c_min: float = 0.2  # minimum crop area ratio
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: tuple = (1.0, 0.1)      # (pipeline T, pipeline T')
    solarize_prob: tuple = (0.0, 0.2)  # (pipeline T, pipeline T')

    def __post_init__(self):
        if not 0.0 < self.c_min <= 1.0:
            raise ValueError("c_min must lie in (0, 1]")
        self.blur_prob = tuple(float(p) for p in self.blur_prob)
        self.solarize_prob = tuple(float(p) for p in self.solarize_prob)

    def to_flat_dict(self, prefix="aug."):
        d = asdict(self)
        d["blur_prob"] = ",".join(str(p) for p in self.blur_prob)
        d["solarize_prob"] = ",".join(str(p) for p in self.solarize_prob)
        return {prefix + k: v for k, v in d.items()}

    @classmethod
    def from_flat_dict(cls, d, prefix="aug."):
        kw = {}
        for key in ("output_size",):
            if prefix + key in d:
                kw[key] = int(d[prefix + key])
        for key in ("c_min", "flip_prob", "jitter_prob", "brightness", "contrast", "saturation", "hue", "grayscale_prob"):
            if prefix + key in d:
                kw[key] = float(d[prefix + key])
        for key in ("blur_prob", "solarize_prob"):
            if prefix + key in d:
                kw[key] = tuple(float(x) for x in str(d[prefix + key]).split(","))
        return cls(**kw)


def desk_policy(output_size=32, c_min=0.2):
    """Small-image preset: BYOL-style jitter, no blur (32x32 inputs)."""
    return AugmentationPolicy(
        output_size=output_size,
        c_min=c_min,
        blur_prob=(0.0, 0.0),
        solarize_prob=(0.0, 0.2),
    )


def identity_policy(output_size):
    return AugmentationPolicy(
        output_size=output_size,
        c_min=1.0,
        flip_prob=0.0,
        jitter_prob=0.0,
        grayscale_prob=0.0,
        blur_prob=(0.0, 0.0),
        solarize_prob=(0.0, 0.0),
    )


def bilinear_resize(img, out_h, out_w):
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_crop(shape, c_min, rng, attempts=10):
    """Crop box (top, left, height, width) with area ratio in [c_min, 1]."""
    h, w = shape[:2]
    if h == 0 or w == 0:
        raise ValueError("degenerate image with zero extent")
    area = h * w
    for _ in range(attempts):
        ratio = rng.uniform(c_min, 1.0)
        target = ratio * area
        log_aspect = rng.uniform(np.log(3.0 / 4.0), np.log(4.0 / 3.0))
        aspect = np.exp(log_aspect)
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h and ch * cw >= c_min * area:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w  # whole image fallback


def _grayscale(img):
    luma = img @ np.array([0.299, 0.587, 0.114])
    return np.repeat(luma[..., None], 3, axis=2)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.5959, -0.2746, -0.3213], [0.2115, -0.5227, 0.3112]])
_YIQ_INV = np.linalg.inv(_YIQ)


def _hue_rotate(img, theta):
    yiq = img @ _YIQ.T
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    return yiq @ rot.T @ _YIQ_INV.T


def _gaussian_blur(img, sigma, ksize):
    radius = ksize // 2
    xs = np.arange(-radius, radius + 1)
    kern = np.exp(-0.5 * (xs / sigma) ** 2)
    kern /= kern.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    rows = sum(kern[i] * padded[i : i + img.shape[0]] for i in range(ksize))
    padded = np.pad(rows, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    return sum(kern[i] * padded[:, i : i + img.shape[1]] for i in range(ksize))


def _augment_once(img, policy, pipeline, rng):
    top, left, ch, cw = sample_crop(img.shape, policy.c_min, rng)
    view = img[top : top + ch, left : left + cw]
    view = bilinear_resize(view, policy.output_size, policy.output_size)

    if rng.random() < policy.flip_prob:
        view = view[:, ::-1]

    if rng.random() < policy.jitter_prob:
        f = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
        view = view * f
        f = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
        view = (view - view.mean()) * f + view.mean()
        f = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation)
        gray = _grayscale(view)
        view = gray + (view - gray) * f
        theta = rng.uniform(-policy.hue, policy.hue) * 2.0 * np.pi
        view = _hue_rotate(view, theta)
        view = np.clip(view, 0.0, 1.0)

    if rng.random() < policy.grayscale_prob:
        view = _grayscale(view)

    if rng.random() < policy.blur_prob[pipeline]:
        sigma = rng.uniform(0.1, 2.0)
        ksize = max(3, (policy.output_size // 10) | 1)
        view = _gaussian_blur(view, sigma, ksize)

    if rng.random() < policy.solarize_prob[pipeline]:
        view = np.where(view > 0.5, 1.0 - view, view)

    view = np.clip(view, 0.0, 1.0)
    return np.ascontiguousarray(view.transpose(2, 0, 1)).astype(np.float32)


def augment_pair(image, policy, rng):
    """Two independently augmented CHW views of one HWC image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HWC RGB image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("degenerate image with zero extent")
    v = _augment_once(image, policy, 0, rng)
    vp = _augment_once(image, policy, 1, rng)
    return v, vp
