"""Procedural two-domain lesion dataset, augmentation and PPM/PGM I/O.

Domain A looks like grayscale B-mode ultrasound: a dark lesion on a
brighter speckled background. Domain B shares the mask geometry
distribution but is rendered with a colour tint, smooth texture and
additive noise. For a given seed the two domains produce the same mask.
"""

from __future__ import annotations

import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

DOMAINS = ("A", "B")
SPLITS = ("train", "test")


class DataFormatError(IOError):
    """Base class for malformed image/mask files."""


class HeaderError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class MaskValueError(DataFormatError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenSpec:
    height: int = 96
    width: int = 96
    blobs: tuple[int, int] = (1, 2)
    # semi-axis range as a fraction of the image side
    axis_range: tuple[float, float] = (0.14, 0.32)
    centre_range: tuple[float, float] = (0.3, 0.7)
    fg_range: tuple[float, float] = (0.10, 0.45)
    max_retries: int = 200
    # domain A
    a_background: tuple[float, float] = (0.55, 0.75)
    a_lesion: tuple[float, float] = (0.15, 0.35)
    a_speckle: float = 0.3
    # domain B
    # bright and warm-tinted: to an A-trained model every B pixel looks like background
    b_background_rgb: tuple[float, float, float] = (0.95, 0.92, 0.8)
    b_lesion_rgb: tuple[float, float, float] = (0.95, 0.7, 0.45)
    b_background_level: tuple[float, float] = (0.9, 1.0)
    b_lesion_level: tuple[float, float] = (0.85, 1.0)
    b_smooth: float = 2.0
    b_noise: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenSpec keys: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplePair:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    domain: str
    seed: int = 0

    @property
    def foreground(self) -> float:
        return float(self.mask.mean())


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


def _ellipse(h, w, cy, cx, ay, ax, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy += 0.5 - cy
    xx += 0.5 - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def gen_mask(spec: GenSpec, seed: int) -> np.ndarray:
    """Union of 1-2 random ellipses, resampled until the foreground fraction fits."""
    rng = _rng(seed, 0)
    h, w = spec.height, spec.width
    side = min(h, w)
    lo, hi = spec.fg_range
    for _ in range(spec.max_retries):
        n = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(n):
            cy = rng.uniform(*spec.centre_range) * h
            cx = rng.uniform(*spec.centre_range) * w
            ay = rng.uniform(*spec.axis_range) * side
            ax = rng.uniform(*spec.axis_range) * side
            theta = rng.uniform(0, np.pi)
            mask |= _ellipse(h, w, cy, cx, ay, ax, theta)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask.astype(np.uint8)
    raise GenerationError(
        f"no mask with foreground in [{lo}, {hi}] after {spec.max_retries} draws (seed {seed})"
    )


def _render_a(spec: GenSpec, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = mask.shape
    soft = gaussian_filter(mask.astype(np.float64), 1.0)
    bg = rng.uniform(*spec.a_background)
    les = rng.uniform(*spec.a_lesion)
    texture = gaussian_filter(rng.normal(size=(h, w)), 3.0) * 0.6
    base = bg * (1 - soft) + les * soft + 0.08 * texture
    speckle = 1.0 + spec.a_speckle * rng.normal(size=(h, w))
    gray = np.clip(base * speckle, 0.0, 1.0)
    return np.repeat(gray[None], 3, axis=0)


def _render_b(spec: GenSpec, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = mask.shape
    soft = gaussian_filter(mask.astype(np.float64), 1.5)
    bg_level = rng.uniform(*spec.b_background_level)
    les_level = rng.uniform(*spec.b_lesion_level)
    bg = np.asarray(spec.b_background_rgb)[:, None, None] * bg_level
    les = np.asarray(spec.b_lesion_rgb)[:, None, None] * les_level
    texture = gaussian_filter(rng.normal(size=(h, w)), spec.b_smooth) * 0.5
    img = bg * (1 - soft) + les * soft
    img = img * (1.0 + 0.3 * texture)[None]
    img = img + spec.b_noise * rng.normal(size=(3, h, w))
    return np.clip(img, 0.0, 1.0)


def gen_sample(spec: GenSpec, domain: str, seed: int) -> SamplePair:
    """Deterministic in (spec, domain, seed); masks depend on seed only."""
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    mask = gen_mask(spec, seed)
    rng = _rng(seed, 1 + DOMAINS.index(domain))
    render = _render_a if domain == "A" else _render_b
    image = render(spec, mask, rng).astype(np.float32)
    return SamplePair(image=image, mask=mask, domain=domain, seed=int(seed))


# -- augmentation ------------------------------------------------------------------

def _axis_map(n: int, scale: float, offset_u: float):
    """Source coordinates for each output index after resize-by-scale and crop/pad."""
    n_res = max(1, int(round(n * scale)))
    ratio = n_res / n
    out = np.arange(n)
    if n_res >= n:
        off = int(np.floor(offset_u * (n_res - n + 1)))
        r = out + off
    else:
        off = int(np.floor(offset_u * (n - n_res + 1)))
        r = out - off
    inside = (r >= 0) & (r < n_res)
    src = (r + 0.5) / ratio - 0.5
    nearest = np.clip(np.floor((r + 0.5) / ratio).astype(np.int64), 0, n - 1)
    return src, nearest, inside


def _bilinear_1d(src: np.ndarray, n: int):
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    return lo, hi, frac


def augment(p: SamplePair, seed: int, *, flip: bool | None = None, scale: float | None = None) -> SamplePair:
    """Random horizontal flip (p=0.5) and resize in [0.75, 1.25] cropped/padded back.

    The same geometry is applied to image (bilinear) and mask (nearest).
    ``flip`` and ``scale`` override the random draws.
    """
    rng = _rng(seed, 7)
    do_flip = rng.random() < 0.5
    s = rng.uniform(0.75, 1.25)
    oy, ox = rng.random(), rng.random()
    if flip is not None:
        do_flip = flip
    if scale is not None:
        s = scale
    _, h, w = p.image.shape

    sy, ny, iy = _axis_map(h, s, oy)
    sx, nx, ix = _axis_map(w, s, ox)
    y0, y1, fy = _bilinear_1d(sy, h)
    x0, x1, fx = _bilinear_1d(sx, w)
    img = p.image.astype(np.float64)
    fy = fy[:, None]
    fx = fx[None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bot * fy
    valid = iy[:, None] & ix[None, :]
    out = np.where(valid[None], out, 0.0).astype(np.float32)
    mask = np.where(valid, p.mask[ny][:, nx], 0).astype(np.uint8)
    if do_flip:
        out = out[:, :, ::-1].copy()
        mask = mask[:, ::-1].copy()
    return SamplePair(image=out, mask=mask, domain=p.domain, seed=p.seed)


# -- PPM / PGM ---------------------------------------------------------------------

def _quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    q = _quantize(image).transpose(1, 2, 0)
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def write_pgm_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise MaskValueError("mask labels must be 0 or 1")
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + (m.astype(np.uint8) * 255).tobytes())


def _parse_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if data[:2] != magic:
        raise HeaderError(f"{path}: expected magic {magic!r}, found {data[:2]!r}")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeaderError(f"{path}: incomplete header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise HeaderError(f"{path}: non-numeric header field") from exc
    if w <= 0 or h <= 0 or maxval != 255:
        raise HeaderError(f"{path}: unsupported dimensions or maxval ({w}, {h}, {maxval})")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _parse_header(data, b"P6", path)
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) < need:
        raise TruncatedError(f"{path}: expected {need} raster bytes, found {len(raw)}")
    q = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (q.astype(np.float32) / np.float32(255.0))


def read_pgm_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _parse_header(data, b"P5", path)
    raw = data[pos:pos + w * h]
    if len(raw) < w * h:
        raise TruncatedError(f"{path}: expected {w * h} raster bytes, found {len(raw)}")
    q = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    if not np.all((q == 0) | (q == 255)):
        raise MaskValueError(f"{path}: mask values must be 0 or 255")
    return (q // 255).astype(np.uint8)


def write_sample(p: SamplePair, directory, stem: str) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / f"{stem}.ppm", p.image)
    write_pgm_mask(d / f"{stem}.pgm", p.mask)
    return d / f"{stem}.ppm"


def read_sample(image_path, domain: str, seed: int = 0) -> SamplePair:
    image_path = Path(image_path)
    image = read_ppm(image_path)
    mask = read_pgm_mask(image_path.with_suffix(".pgm"))
    if mask.shape != image.shape[1:]:
        raise DataFormatError(f"{image_path}: mask {mask.shape} does not match image {image.shape[1:]}")
    return SamplePair(image=image, mask=mask, domain=domain, seed=seed)


def write_read(p: SamplePair, directory, stem: str = "sample") -> SamplePair:
    path = write_sample(p, directory, stem)
    return read_sample(path, p.domain, p.seed)


# -- splits and manifest -----------------------------------------------------------

SEED_BLOCK = 1_000_000
MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "# path\tdomain\tsplit\tseed"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    domain: str
    split: str
    seed: int


def split_seeds(master_seed: int, domain: str, split: str, count: int) -> range:
    """Disjoint seed block for each (domain, split)."""
    if count > SEED_BLOCK:
        raise ValueError(f"at most {SEED_BLOCK} samples per split")
    block = DOMAINS.index(domain) * 2 + SPLITS.index(split)
    start = master_seed * 4 * SEED_BLOCK + block * SEED_BLOCK
    return range(start, start + count)


def make_split(
    spec: GenSpec,
    n_train_A: int,
    n_test_A: int,
    n_train_B: int,
    n_test_B: int,
    master_seed: int,
    out_dir,
    *,
    force: bool = False,
) -> list[ManifestEntry]:
    counts = {("A", "train"): n_train_A, ("A", "test"): n_test_A, ("B", "train"): n_train_B, ("B", "test"): n_test_B}
    if any(c < 1 for c in counts.values()):
        raise ValueError(f"every split needs at least one sample, got {counts}")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
        for child in out.iterdir():
            shutil.rmtree(child) if child.is_dir() else child.unlink()
    out.mkdir(parents=True, exist_ok=True)

    entries = []
    for (domain, split), count in counts.items():
        for seed in split_seeds(master_seed, domain, split, count):
            p = gen_sample(spec, domain, seed)
            stem = f"{seed:012d}"
            write_sample(p, out / domain / split, stem)
            entries.append(ManifestEntry(f"{domain}/{split}/{stem}.ppm", domain, split, seed))
    write_manifest(out / MANIFEST, entries)
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    lines = [MANIFEST_HEADER] + [f"{e.path}\t{e.domain}\t{e.split}\t{e.seed}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[1] not in DOMAINS or parts[2] not in SPLITS:
            raise DataFormatError(f"{path}:{n}: malformed manifest line {line!r}")
        entries.append(ManifestEntry(parts[0], parts[1], parts[2], int(parts[3])))
    return entries


@dataclass
class SplitArrays:
    images: np.ndarray  # N x 3 x H x W float32
    masks: np.ndarray  # N x H x W uint8
    seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.images)


def load_split(root, domain: str, split: str) -> SplitArrays:
    """Read every manifest entry of one (domain, split) into memory."""
    root = Path(root)
    entries = [e for e in read_manifest(root / MANIFEST) if e.domain == domain and e.split == split]
    if not entries:
        raise ValueError(f"no samples for domain {domain} split {split} in {root}")
    samples = [read_sample(root / e.path, e.domain, e.seed) for e in entries]
    return SplitArrays(
        images=np.stack([s.image for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        seeds=np.array([e.seed for e in entries], dtype=np.int64),
    )


def dataset_exists(root) -> bool:
    return os.path.exists(Path(root) / MANIFEST)
