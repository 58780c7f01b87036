"""Synthetic infrared scenes and bit-exact PGM interchange.

A scene is a smooth clutter background with a few Gaussian bumps on top.
The ground-truth mask of a bump is the set of pixels where its noise-free
profile reaches half its peak, i.e. ``d^2 <= 2 ln 2 * radius^2``.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from denet.losses import edge_gt_from_mask
from denet.tensor import Tensor

HALF_PEAK = math.sqrt(2.0 * math.log(2.0))
MARGIN = 2
MAX_ATTEMPTS = 100


class SceneGenerationError(RuntimeError):
    pass


class PGMError(ValueError):
    pass


@dataclass
class SceneSpec:
    size: tuple[int, int] = (64, 64)
    n_targets: int = 4
    target_radius_px: tuple[float, float] = (0.8, 4.0)
    target_contrast: tuple[float, float] = (0.05, 0.4)
    clutter_scale: int = 6
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(self.size)
        self.target_radius_px = tuple(self.target_radius_px)
        self.target_contrast = tuple(self.target_contrast)
        if not 1 <= self.n_targets <= 4:
            raise ValueError("n_targets must be in 1..4")
        lo, hi = self.target_radius_px
        if not 0 < lo <= hi:
            raise ValueError("bad target radius range")


@dataclass
class SceneSample:
    image: np.ndarray   # 1 x H x W in [0, 1]
    mask: np.ndarray    # 1 x H x W, {0, 1}
    edge: np.ndarray    # 1 x H x W, {0, 1}
    targets: list = field(default_factory=list)  # (cy, cx, radius)


def target_footprint(shape: tuple[int, int], cy: float, cx: float, radius: float) -> np.ndarray:
    """Pixels where a Gaussian bump of std ``radius`` is at least half its peak."""
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= 2.0 * math.log(2.0) * radius ** 2


def _background(rng: np.random.Generator, h: int, w: int, clutter: int) -> np.ndarray:
    noise = rng.standard_normal((h, w))
    if clutter > 0:
        noise = ndimage.uniform_filter(noise, size=2 * clutter + 1, mode="reflect")
    lo, hi = noise.min(), noise.max()
    if hi - lo < 1e-12:
        return np.full((h, w), 0.4)
    return 0.2 + 0.4 * (noise - lo) / (hi - lo)


def gen_scene(spec: SceneSpec) -> SceneSample:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    image = _background(rng, h, w, spec.clutter_scale)
    count = int(rng.integers(1, spec.n_targets + 1))
    placed: list[tuple[int, int, float]] = []
    yy, xx = np.mgrid[:h, :w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(count):
        for _attempt in range(MAX_ATTEMPTS):
            r = float(rng.uniform(*spec.target_radius_px))
            reach = HALF_PEAK * r
            lo = int(math.ceil(reach)) + MARGIN
            if lo > h - 1 - lo or lo > w - 1 - lo:
                raise SceneGenerationError(f"radius {r:.2f} does not fit in a {h}x{w} image")
            cy = int(rng.integers(lo, h - lo))
            cx = int(rng.integers(lo, w - lo))
            # keep a 2 px gap so 8-connected footprints never merge
            if all(math.hypot(cy - py, cx - px) > reach + HALF_PEAK * pr + 2 for py, px, pr in placed):
                break
        else:
            raise SceneGenerationError(f"could not place target {len(placed) + 1} after {MAX_ATTEMPTS} attempts")
        contrast = float(rng.uniform(*spec.target_contrast))
        profile = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
        image = image + contrast * profile
        mask |= profile >= 0.5
        placed.append((cy, cx, r))
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.standard_normal((h, w))
    image = np.clip(image, 0.0, 1.0)
    mask_u8 = mask.astype(np.uint8)[None]
    return SceneSample(image[None], mask_u8, edge_gt_from_mask(mask_u8), placed)


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)
# ---------------------------------------------------------------------------

def quantize(image) -> np.ndarray:
    """[0, 1] -> uint8 with round-half-up."""
    v = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    return np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, image) -> None:
    q = quantize(image)
    q = q.reshape(q.shape[-2:])
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm_bytes(path) -> np.ndarray:
    """Raw uint8 pixels, shape ``H x W``."""
    buf = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise PGMError(f"{path}: malformed header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise PGMError(f"{path}: maxval {maxval} is not 255")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMError(f"{path}: malformed header")
    pos += 1
    payload = buf[pos:pos + w * h]
    if len(payload) != w * h:
        raise PGMError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> Tensor:
    return Tensor(read_pgm_bytes(path)[None] / 255.0)


def read_mask(path) -> np.ndarray:
    return (read_pgm_bytes(path) > 127).astype(np.uint8)[None]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

MANIFEST = "index.tsv"


def gen_dataset(directory, count: int, spec_base: SceneSpec, seed: int) -> list[tuple[str, str, str]]:
    """Write ``count`` scenes plus ``index.tsv``; sample ``i`` uses seed ``seed + i``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        sample = gen_scene(replace(spec_base, seed=seed + i))
        names = (f"img_{i:05d}.pgm", f"msk_{i:05d}.pgm", f"edg_{i:05d}.pgm")
        for name, arr in zip(names, (sample.image, sample.mask, sample.edge)):
            try:
                write_pgm(out / name, arr)
            except OSError as exc:
                raise OSError(f"failed to write {out / name}: {exc}") from exc
        rows.append(names)
    (out / MANIFEST).write_text("".join("\t".join(r) + "\n" for r in rows))
    return rows


def read_manifest(directory) -> list[tuple[str, str, str]]:
    path = Path(directory) / MANIFEST
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 3 tab-separated fields")
        rows.append(tuple(parts))
    return rows


@dataclass
class Example:
    image: np.ndarray
    mask: np.ndarray
    edge: np.ndarray
    name: str = ""


def load_dataset(directory) -> list[Example]:
    d = Path(directory)
    return [Example(read_pgm_bytes(d / img)[None] / 255.0, read_mask(d / msk), read_mask(d / edg), img)
            for img, msk, edg in read_manifest(d)]


def dataset_hash(directory) -> str:
    """SHA-256 over the manifest and every file it names, in manifest order."""
    d = Path(directory)
    h = hashlib.sha256((d / MANIFEST).read_bytes())
    for row in read_manifest(d):
        for name in row:
            h.update((d / name).read_bytes())
    return h.hexdigest()


def spec_to_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
