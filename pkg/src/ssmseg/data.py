"""Data plumbing: synthetic multi-domain generation, folder ingestion,
leave-one-domain-out splits, and train-time geometric augmentation.

Synthetic samples are nested-ellipse pairs (outer "disc" class 0, inner
"cup" class 1) rendered on a textured background; each domain applies its
own appearance transform (gamma, brightness, contrast, low-frequency
texture, channel tint) to the image only, so ground-truth masks are
style-invariant. Images are 3-channel float64 in [-1, 1]; masks are
binary [K, H, W].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


@dataclass
class DomainSpec:
    """Appearance parameters of one synthetic domain."""
    name: str = "domain"
    gamma: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    texture_amp: float = 0.05
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)


# Calibrated so that a source-only model degrades measurably on the
# held-out domain: two bright-ish domains, two dark ones (the dark pair
# sits below the 0.4 brightness gate).
DEFAULT_DOMAINS = [
    DomainSpec("bright_warm", gamma=0.75, brightness=0.18, contrast=1.05,
               texture_amp=0.04, tint=(1.0, 0.92, 0.80)),
    DomainSpec("neutral", gamma=1.0, brightness=0.0, contrast=1.0,
               texture_amp=0.08, tint=(0.88, 1.0, 0.92)),
    DomainSpec("dark_cool", gamma=1.9, brightness=-0.22, contrast=0.95,
               texture_amp=0.05, tint=(0.82, 0.88, 1.0)),
    DomainSpec("dim_flat", gamma=1.5, brightness=-0.34, contrast=0.55,
               texture_amp=0.10, tint=(1.0, 1.0, 0.86)),
]


@dataclass
class Sample:
    image: np.ndarray          # [3, H, W] in [-1, 1]
    mask: np.ndarray           # [K, H, W] in {0, 1}
    domain_id: int


@dataclass
class DomainDataset:
    domain_id: int
    samples: list[Sample]
    style: DomainSpec

    def __len__(self):
        return len(self.samples)


@dataclass
class SplitPlan:
    held_out_domain: int
    source_domains: list[int]


def normalize(x01: np.ndarray) -> np.ndarray:
    """[0, 1] intensities -> [-1, 1]."""
    return x01 * 2.0 - 1.0


def un_normalize(x: np.ndarray) -> np.ndarray:
    """[-1, 1] intensities -> [0, 1]."""
    return (x + 1.0) * 0.5


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 6) -> np.ndarray:
    """Zero-mean low-frequency field via bilinear upsampling of a coarse
    standard-normal grid."""
    grid = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy - cy
    x = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / rx
    v = (-x * st + y * ct) / ry
    return (u * u + v * v <= 1.0).astype(np.float64)


def _render_geometry(rng: np.random.Generator, h: int, w: int, n_classes: int):
    """Style-independent scene: intensity field in [0,1] and class masks."""
    cy = rng.uniform(0.35, 0.65) * h
    cx = rng.uniform(0.35, 0.65) * w
    ry = rng.uniform(0.16, 0.30) * h
    rx = rng.uniform(0.16, 0.30) * w
    theta = rng.uniform(0.0, np.pi)
    disc = _ellipse_mask(h, w, cy, cx, ry, rx, theta)
    masks = [disc]
    if n_classes >= 2:
        s = rng.uniform(0.40, 0.62)
        off_y = rng.uniform(-0.15, 0.15) * ry
        off_x = rng.uniform(-0.15, 0.15) * rx
        cup = _ellipse_mask(h, w, cy + off_y, cx + off_x, ry * s, rx * s, theta)
        cup = cup * disc  # keep the inner class nested
        masks.append(cup)
    for _ in range(max(0, n_classes - 2)):
        bcy = rng.uniform(0.2, 0.8) * h
        bcx = rng.uniform(0.2, 0.8) * w
        br = rng.uniform(0.06, 0.12) * min(h, w)
        masks.append(_ellipse_mask(h, w, bcy, bcx, br, br, 0.0))

    base = 0.32 + 0.06 * _smooth_field(rng, h, w, cells=5)
    base = base + 0.26 * masks[0]
    if n_classes >= 2:
        base = base + 0.18 * masks[1]
    base = gaussian_filter(base, sigma=1.0)
    base = base + 0.015 * rng.standard_normal((h, w))
    return np.clip(base, 0.02, 0.98), np.stack(masks)


def _apply_style(base01: np.ndarray, spec: DomainSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Domain appearance transform on a [0,1] intensity field -> [3,H,W]."""
    h, w = base01.shape
    tex = spec.texture_amp * _smooth_field(rng, h, w, cells=4)
    chans = []
    for c in range(3):
        img = base01 ** spec.gamma
        img = spec.contrast * (img - 0.5) + 0.5
        img = img * spec.tint[c] + spec.brightness + tex
        chans.append(img)
    return np.clip(np.stack(chans), 0.0, 1.0)


def generate_synthetic(domain_spec: DomainSpec, n_samples: int, seed: int,
                       domain_id: int = 0, size: int = 64,
                       n_classes: int = 2) -> DomainDataset:
    """Deterministic synthetic dataset for one domain. Geometry streams are
    keyed by (seed, domain_id, index), style streams by the same key plus a
    tag, so two specs sharing (seed, domain_id) share geometry exactly."""
    if n_samples < 0 or size < 8 or n_classes < 1:
        raise ValueError("invalid synthetic dataset parameters")
    samples = []
    for i in range(n_samples):
        geo_rng = np.random.default_rng(np.random.SeedSequence([seed, domain_id, i, 0]))
        sty_rng = np.random.default_rng(np.random.SeedSequence([seed, domain_id, i, 1]))
        base, masks = _render_geometry(geo_rng, size, size, n_classes)
        img01 = _apply_style(base, domain_spec, sty_rng)
        samples.append(Sample(image=normalize(img01), mask=masks, domain_id=domain_id))
    return DomainDataset(domain_id=domain_id, samples=samples, style=domain_spec)


def make_default_domains(n_domains: int, train_per_domain: int,
                         test_per_domain: int, seed: int, size: int = 64,
                         n_classes: int = 2):
    """(train_sets, test_sets) over the built-in domain styles."""
    if n_domains > len(DEFAULT_DOMAINS):
        raise ValueError(f"at most {len(DEFAULT_DOMAINS)} built-in domains")
    train_sets, test_sets = {}, {}
    for d in range(n_domains):
        spec = DEFAULT_DOMAINS[d]
        train_sets[d] = generate_synthetic(spec, train_per_domain, seed, d, size, n_classes)
        # disjoint index range for test samples
        test = generate_synthetic(spec, train_per_domain + test_per_domain,
                                  seed, d, size, n_classes)
        test.samples = test.samples[train_per_domain:]
        test_sets[d] = test
    return train_sets, test_sets


def make_splits(domains, held_out: int) -> SplitPlan:
    """Leave-one-domain-out plan; ``domains`` is an iterable of ids."""
    ids = sorted(int(d) for d in domains)
    if len(ids) < 2:
        raise ValueError("need at least two domains")
    if held_out not in ids:
        raise ValueError(f"unknown domain id {held_out}; have {ids}")
    return SplitPlan(held_out_domain=held_out,
                     source_domains=[d for d in ids if d != held_out])


# -- geometric train-time augmentation -------------------------------------


def _resize_bilinear(arr: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Channelwise bilinear resize of [..., H, W]."""
    h, w = arr.shape[-2:]
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _resize_nearest(arr: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    ys = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return arr[..., ys[:, None], xs[None, :]]


def training_augment(sample: Sample, rng: np.random.Generator,
                     scale_range=(0.8, 1.2)) -> Sample:
    """Random resized crop plus horizontal flip, applied identically to the
    image (bilinear) and mask (nearest, re-binarized)."""
    img, mask = sample.image, sample.mask
    h, w = img.shape[-2:]
    u = rng.uniform(*scale_range)
    side_h, side_w = int(round(h * u)), int(round(w * u))
    if u <= 1.0:
        top = rng.integers(0, h - side_h + 1)
        left = rng.integers(0, w - side_w + 1)
        img_c = img[:, top:top + side_h, left:left + side_w]
        mask_c = mask[:, top:top + side_h, left:left + side_w]
    else:
        ph, pw = side_h - h, side_w - w
        pad = ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        img_c = np.pad(img, pad, mode="reflect")
        mask_c = np.pad(mask, pad, mode="reflect")
    img_o = _resize_bilinear(img_c, h, w)
    mask_o = (_resize_nearest(mask_c, h, w) > 0.5).astype(np.float64)
    if rng.random() < 0.5:
        img_o = img_o[:, :, ::-1].copy()
        mask_o = mask_o[:, :, ::-1].copy()
    return Sample(image=img_o, mask=mask_o, domain_id=sample.domain_id)


class BalancedSampler:
    """Domain-balanced batch stream: each slot picks a source domain
    uniformly, then a sample uniformly within it (with replacement)."""

    def __init__(self, datasets: dict[int, DomainDataset], batch_size: int,
                 rng: np.random.Generator, augment: bool = True):
        if not datasets:
            raise ValueError("no source datasets")
        self.datasets = datasets
        self.ids = sorted(datasets)
        self.batch_size = batch_size
        self.rng = rng
        self.augment = augment

    def next_batch(self):
        imgs, masks, doms = [], [], []
        for _ in range(self.batch_size):
            d = self.ids[self.rng.integers(0, len(self.ids))]
            ds = self.datasets[d]
            s = ds.samples[self.rng.integers(0, len(ds.samples))]
            if self.augment:
                s = training_augment(s, self.rng)
            imgs.append(s.image)
            masks.append(s.mask)
            doms.append(d)
        return np.stack(imgs), np.stack(masks), np.asarray(doms)


# -- folder layout ----------------------------------------------------------


def export_folder(dataset: DomainDataset, root: str | Path):
    """Write the dataset in the paired-folder layout (images/ + masks/,
    8-bit PNG, mask classes in RGB channels)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(dataset.samples):
        stem = f"d{dataset.domain_id}_{i:04d}"
        img8 = (un_normalize(s.image).transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(img8).save(root / "images" / f"{stem}.png")
        k, h, w = s.mask.shape
        m8 = np.zeros((h, w, 3), dtype=np.uint8)
        for c in range(min(k, 3)):
            m8[:, :, c] = (s.mask[c] * 255).astype(np.uint8)
        Image.fromarray(m8).save(root / "masks" / f"{stem}.png")
    meta = {"domain_id": dataset.domain_id, "style": asdict(dataset.style),
            "n_samples": len(dataset.samples)}
    (root / "domain.json").write_text(json.dumps(meta, indent=2))


def load_folder(path: str | Path, domain_id: int, size: int = 64,
                n_classes: int = 2) -> DomainDataset:
    """Load paired images/masks by matching stems; images normalized to
    [-1,1] and resized bilinearly, masks binarized at 127 after nearest
    resize. Mask PNG channels map to classes (grayscale = one class)."""
    root = Path(path)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and masks/")
    samples = []
    for img_path in sorted(img_dir.iterdir()):
        if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
            continue
        stem = img_path.stem
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"no mask paired with image stem '{stem}'")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        img = img.transpose(2, 0, 1)
        img = _resize_bilinear(img, size, size)
        mask_raw = np.asarray(Image.open(mask_path), dtype=np.float64)
        if mask_raw.ndim == 2:
            mask_raw = mask_raw[:, :, None]
        mask = mask_raw.transpose(2, 0, 1)[:n_classes]
        if mask.shape[0] < n_classes:
            raise ValueError(f"mask '{stem}' has {mask.shape[0]} channels, "
                             f"need {n_classes}")
        mask = (_resize_nearest(mask, size, size) > 127.0).astype(np.float64)
        samples.append(Sample(image=normalize(img), mask=mask, domain_id=domain_id))
    style = DomainSpec(name=f"folder:{root.name}")
    return DomainDataset(domain_id=domain_id, samples=samples, style=style)
