"""Synthetic blur pairs, image I/O, patch sampling and flip augmentation.

Images are float64 arrays of shape (3, H, W) with values in [0, 1].
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError

KERNEL_KINDS = ("gaussian", "linear_motion")


@dataclass
class BlurSpec:
    kernel_kind: str = "gaussian"
    kernel_size: int = 9
    sigma: float = 2.0
    length: float = 9.0
    angle: float = 0.0  # degrees
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kernel_kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel_kind {self.kernel_kind!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.kernel_kind == "gaussian" and self.kernel_size > 1 and self.sigma <= 0:
            raise ConfigError("sigma must be > 0")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def motion_kernel(size: int, length: float, angle: float) -> np.ndarray:
    """Normalised line of ``length`` pixels through the centre at ``angle`` degrees."""
    k = np.zeros((size, size))
    c = size // 2
    theta = np.deg2rad(angle)
    for t in np.linspace(-length / 2, length / 2, max(2, int(4 * length))):
        x = int(round(c + t * np.cos(theta)))
        y = int(round(c - t * np.sin(theta)))
        if 0 <= x < size and 0 <= y < size:
            k[y, x] += 1.0
    if k.sum() == 0:
        k[c, c] = 1.0
    return k / k.sum()


def blur_kernel(spec: BlurSpec) -> np.ndarray:
    if spec.kernel_size == 1:
        return np.ones((1, 1))
    if spec.kernel_kind == "gaussian":
        return gaussian_kernel(spec.kernel_size, spec.sigma)
    return motion_kernel(spec.kernel_size, spec.length, spec.angle)


def make_blur_pair(sharp: np.ndarray, spec: BlurSpec) -> tuple[np.ndarray, np.ndarray]:
    sharp = np.asarray(sharp, dtype=np.float64)
    k = blur_kernel(spec)
    blurred = np.stack([ndimage.convolve(ch, k, mode="nearest") for ch in sharp])
    if spec.noise_std > 0:
        blurred = blurred + np.random.default_rng(spec.seed).normal(0.0, spec.noise_std, blurred.shape)
    return sharp, np.clip(blurred, 0.0, 1.0)


def procedural_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random background gradient plus rectangles, discs and thin strokes."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    a, b, c0 = rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 3), rng.uniform(0.2, 0.8, 3)
    img = c0[:, None, None] + a[:, None, None] * xx + b[:, None, None] * yy
    for _ in range(rng.integers(3, 8)):
        color = rng.uniform(0, 1, 3)[:, None]
        y0, x0 = rng.integers(0, size, 2)
        h, w = rng.integers(size // 8, size // 2, 2)
        img[:, y0:y0 + h, x0:x0 + w] = color[:, :, None]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(size / 16, size / 5)
        mask = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2 < rad ** 2
        img[:, mask] = rng.uniform(0, 1, 3)[:, None]
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, 3)
        y0, x0 = rng.integers(0, size, 2)
        theta = rng.uniform(0, np.pi)
        for t in range(int(rng.integers(size // 4, size))):
            y = int(y0 + t * np.sin(theta)) % size
            x = int(x0 + t * np.cos(theta)) % size
            img[:, y, x] = color
    return np.clip(img, 0.0, 1.0)


def random_blur_spec(rng: np.random.Generator, noise_std: float = 0.0) -> BlurSpec:
    seed = int(rng.integers(0, 2 ** 31 - 1))
    if rng.random() < 0.5:
        sigma = float(rng.uniform(1.0, 3.0))
        size = 2 * int(np.ceil(3 * sigma)) + 1
        return BlurSpec("gaussian", size, sigma=sigma, noise_std=noise_std, seed=seed)
    length = float(rng.uniform(5.0, 15.0))
    size = 2 * int(np.ceil(length / 2)) + 1
    return BlurSpec("linear_motion", size, length=length, angle=float(rng.uniform(0, 180)),
                    noise_std=noise_std, seed=seed)


# ---------------------------------------------------------------- image I/O

def _to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ConfigError(f"expected (3, H, W) image, got {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:2] != b"P6":
        raise OSError(f"{path}: not a binary PPM (magic {data[:2]!r}, expected b'P6')")
    # header: magic, width, height, maxval separated by whitespace; '#' comments allowed
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise OSError(f"{path}: malformed PPM header {fields}") from None
    if not 0 < maxval < 256:
        raise OSError(f"{path}: unsupported PPM maxval {maxval}")
    if len(data) < pos + 1 + w * h * 3:
        raise OSError(f"{path}: truncated PPM pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / maxval


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise OSError(f"image not found: {path}")
    if path.suffix.lower() == ".ppm":
        arr = _read_ppm(path)
    else:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except Exception as exc:  # PIL raises a zoo of types on bad files
            raise OSError(f"{path}: cannot decode image ({exc})") from exc
    return arr.transpose(2, 0, 1).copy()


def save_image(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    px = _to_uint8(img)
    if path.suffix.lower() == ".ppm":
        h, w, _ = px.shape
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())
    else:
        Image.fromarray(px, "RGB").save(path)
    return path


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRecord:
    sharp: str
    blurred: str
    split: str
    blur: BlurSpec = field(default_factory=BlurSpec)


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def load_pairs(self, split: Optional[str] = None) -> list[tuple[np.ndarray, np.ndarray]]:
        recs = self.records if split is None else self.split(split)
        pairs = []
        for r in recs:
            sharp = load_image(self.root / r.sharp)
            blurred = load_image(self.root / r.blurred)
            if sharp.shape != blurred.shape:
                raise ConfigError(f"pair {r.sharp} / {r.blurred} differ in shape")
            pairs.append((sharp, blurred))
        return pairs


def write_manifest(path, records: list[ManifestRecord]) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"split": r.split, "sharp": r.sharp, "blurred": r.blurred,
                                 "blur": asdict(r.blur)}, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = ManifestRecord(d["sharp"], d["blurred"], d["split"], BlurSpec(**d.get("blur", {})))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        for rel in (rec.sharp, rec.blurred):
            if not (path.parent / rel).is_file():
                raise ConfigError(f"{path}:{lineno}: missing file {rel}")
        records.append(rec)
    return DatasetManifest(path.parent, records)


def generate_dataset(out_dir, n_train: int = 32, n_val: int = 8, size: int = 64,
                     seed: int = 0, noise_std: float = 0.0, fmt: str = "png") -> DatasetManifest:
    """Write procedurally generated sharp/blurred pairs plus ``manifest.jsonl``."""
    if fmt not in ("png", "ppm"):
        raise ConfigError(f"unknown image format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for split, count in (("train", n_train), ("val", n_val)):
        for i in range(count):
            sharp = procedural_image(size, rng)
            spec = random_blur_spec(rng, noise_std)
            _, blurred = make_blur_pair(sharp, spec)
            s_rel, b_rel = f"{split}/{i:04d}_sharp.{fmt}", f"{split}/{i:04d}_blur.{fmt}"
            save_image(out / s_rel, sharp)
            save_image(out / b_rel, blurred)
            records.append(ManifestRecord(s_rel, b_rel, split, spec))
    write_manifest(out / "manifest.jsonl", records)
    return DatasetManifest(out, records)


# ---------------------------------------------------------------- sampling

def sample_patch(pair, size: int, rng: np.random.Generator):
    """Aligned ``size`` x ``size`` crops of both images at one uniform offset."""
    a, b = pair
    h, w = a.shape[-2:]
    if b.shape[-2:] != (h, w):
        raise ConfigError("pair images differ in shape")
    if size > h or size > w:
        raise ConfigError(f"patch size {size} exceeds image {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return a[..., y:y + size, x:x + size], b[..., y:y + size, x:x + size]


def augment_flip(pair, rng: np.random.Generator):
    """Flip both images horizontally, then vertically, each with probability 1/2."""
    a, b = pair
    if rng.random() < 0.5:
        a, b = a[..., :, ::-1], b[..., :, ::-1]
    if rng.random() < 0.5:
        a, b = a[..., ::-1, :], b[..., ::-1, :]
    return a, b
