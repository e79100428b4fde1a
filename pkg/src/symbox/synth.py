"""Synthetic scenes of reflection-symmetric shapes with known symmetry axes.

Each object carries its ground-truth rotated box (evaluation only), its symmetry
axis angle, and the horizontal box used as the weak annotation.
"""
from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, InvalidArgumentError, TruncatedFileError, VersionMismatchError
from .geometry import AlignedBox, OrientedBox, canonicalize, circumscribed_hbox, wrap_half_pi

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "ellipse", "isosceles-triangle", "rounded-rect")
MAGIC = b"SYMBOXDS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 3
    long_side: tuple = (20.0, 36.0)
    aspect: tuple = (1.6, 2.4)
    shape_mix: dict = field(default_factory=lambda: {k: 1.0 for k in SHAPE_KINDS})
    background: float = 0.15
    noise_amplitude: float = 0.05
    intensity: tuple = (0.65, 1.0)
    supersample: int = 4
    min_separation: float = 1.5
    margin: float = 2.0
    max_retries: int = 100

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise InvalidArgumentError("need 1 <= min_objects <= max_objects")
        unknown = set(self.shape_mix) - set(SHAPE_KINDS)
        if unknown:
            raise InvalidArgumentError(f"unknown shape kinds {sorted(unknown)}")
        if sum(self.shape_mix.values()) <= 0:
            raise InvalidArgumentError("shape_mix weights must sum to a positive value")

    @property
    def max_diagonal(self) -> float:
        long_max = self.long_side[1]
        return long_max * math.hypot(1.0, 1.0 / self.aspect[0])


@dataclass(frozen=True)
class ObjectGT:
    shape_kind: str
    rbox: OrientedBox
    theta_sym: float
    hbox: AlignedBox
    class_id: int = 0


@dataclass
class Scene:
    pixels: np.ndarray  # uint8, (H, W)
    objects: list
    seed: int = -1

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @property
    def size(self) -> tuple:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.seed == other.seed and np.array_equal(self.pixels, other.pixels)
                and self.objects == other.objects)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise InvalidArgumentError(f"noise sigma must be in [0, 1), got {self.sigma}")


# ---------------------------------------------------------------- rendering

def shape_mask(kind: str, u: np.ndarray, v: np.ndarray, w: float, h: float) -> np.ndarray:
    """Inside test in the object frame; ``u`` runs along the symmetry axis."""
    hw, hh = 0.5 * w, 0.5 * h
    if kind == "rectangle":
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    if kind == "ellipse":
        return (u / hw) ** 2 + (v / hh) ** 2 <= 1.0
    if kind == "isosceles-triangle":
        # apex at u = +w/2, base of width h at u = -w/2
        return (np.abs(u) <= hw) & (np.abs(v) <= hh * (hw - u) / w)
    if kind == "rounded-rect":
        r = 0.3 * h
        du = np.maximum(np.abs(u) - (hw - r), 0.0)
        dv = np.maximum(np.abs(v) - (hh - r), 0.0)
        return (np.abs(u) <= hw) & (np.abs(v) <= hh) & (du * du + dv * dv <= r * r)
    raise InvalidArgumentError(f"unknown shape kind {kind!r}")


def render_coverage(kind: str, cx: float, cy: float, w: float, h: float, theta: float,
                    size: tuple, supersample: int = 4) -> np.ndarray:
    """Fractional pixel coverage of one shape, anti-aliased by supersampling."""
    H, W = size
    cov = np.zeros((H, W))
    reach = 0.5 * math.hypot(w, h) + 1.0
    c0, c1 = max(int(math.floor(cx - reach)), 0), min(int(math.ceil(cx + reach)), W - 1)
    r0, r1 = max(int(math.floor(cy - reach)), 0), min(int(math.ceil(cy + reach)), H - 1)
    if c0 > c1 or r0 > r1:
        return cov
    s = supersample
    sub = (np.arange(s) + 0.5) / s - 0.5
    xs = (np.arange(c0, c1 + 1)[:, None] + sub[None, :]).reshape(-1)
    ys = (np.arange(r0, r1 + 1)[:, None] + sub[None, :]).reshape(-1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    dx, dy = gx - cx, gy - cy
    c, sn = math.cos(theta), math.sin(theta)
    u = dx * c + dy * sn
    v = -dx * sn + dy * c
    inside = shape_mask(kind, u, v, w, h).astype(np.float64)
    nr, nc = r1 - r0 + 1, c1 - c0 + 1
    cov[r0:r1 + 1, c0:c1 + 1] = inside.reshape(nr, s, nc, s).mean(axis=(1, 3))
    return cov


def _as_rng(rng) -> tuple[np.random.Generator, int]:
    if isinstance(rng, np.random.Generator):
        return rng, -1
    seed = int(rng)
    return np.random.default_rng(seed), seed


def generate_scene(config: SynthConfig = SynthConfig(), rng=0, *, n_objects=None, thetas=None,
                   kinds=None, centers=None, noise: bool = True) -> Scene:
    """Render one scene.

    ``rng`` is a seed or a ``numpy.random.Generator``. The keyword overrides pin the
    object count, angles, shape kinds or centers (used by tests and sanity checks).
    """
    gen, seed = _as_rng(rng)
    H = W = config.image_size
    if n_objects is None:
        n_objects = int(gen.integers(config.min_objects, config.max_objects + 1))
    if thetas is not None or kinds is not None or centers is not None:
        n_objects = len(next(x for x in (thetas, kinds, centers) if x is not None))
    names = [k for k in SHAPE_KINDS if config.shape_mix.get(k, 0) > 0]
    probs = np.array([config.shape_mix[k] for k in names], dtype=np.float64)
    probs /= probs.sum()
    min_sep = config.min_separation * config.max_diagonal

    while True:
        specs = []
        for i in range(n_objects):
            kind = kinds[i] if kinds is not None else names[int(gen.choice(len(names), p=probs))]
            long_side = float(gen.uniform(*config.long_side))
            short = long_side / float(gen.uniform(*config.aspect))
            theta = float(thetas[i]) if thetas is not None else float(gen.uniform(-math.pi / 2, math.pi / 2))
            level = float(gen.uniform(*config.intensity))
            specs.append((kind, long_side, short, theta, level))
        placed = []
        for i, (kind, lw, sh, th, _) in enumerate(specs):
            if centers is not None:
                placed.append(tuple(centers[i]))
                continue
            hb = circumscribed_hbox(OrientedBox(0.0, 0.0, lw, sh, th))
            lo_x, hi_x = config.margin - hb.xmin, W - 1 - config.margin - hb.xmax
            lo_y, hi_y = config.margin - hb.ymin, H - 1 - config.margin - hb.ymax
            for _ in range(config.max_retries):
                p = (float(gen.uniform(lo_x, hi_x)), float(gen.uniform(lo_y, hi_y)))
                if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= min_sep for q in placed):
                    placed.append(p)
                    break
            else:
                break
        if len(placed) == n_objects:
            break
        if n_objects == 1:
            raise InvalidArgumentError("cannot place a single object; image too small for size range")
        logger.debug("placement failed with %d objects, retrying with fewer", n_objects)
        n_objects -= 1

    img = np.full((H, W), config.background)
    if noise and config.noise_amplitude > 0:
        img = img + config.noise_amplitude * gen.random((H, W))
    objects = []
    for (kind, lw, sh, th, level), (cx, cy) in zip(specs, placed):
        cov = render_coverage(kind, cx, cy, lw, sh, th, (H, W), config.supersample)
        img = img * (1.0 - cov) + level * cov
        rbox = canonicalize(OrientedBox(cx, cy, lw, sh, th))
        objects.append(ObjectGT(kind, rbox, wrap_half_pi(th), circumscribed_hbox(rbox)))
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return Scene(pixels, objects, seed)


def scene_seeds(seed: int, count: int) -> list[int]:
    """Per-scene seeds derived from one root seed (independent streams)."""
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in ss.spawn(count)]


def generate_dataset(config: SynthConfig, count: int, seed: int, workers: int = 1) -> list[Scene]:
    seeds = scene_seeds(seed, count)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_gen_one, [config] * count, seeds))
    return [generate_scene(config, s) for s in seeds]


def _gen_one(config, seed):
    return generate_scene(config, seed)


def apply_annotation_noise(scene: Scene, spec: NoiseSpec, rng) -> Scene:
    """Scale each annotation HBox's width and height by independent U(1-sigma, 1+sigma) draws."""
    gen, _ = _as_rng(rng)
    if spec.sigma == 0:
        return Scene(scene.pixels, list(scene.objects), scene.seed)
    out = []
    for obj in scene.objects:
        fx, fy = gen.uniform(1 - spec.sigma, 1 + spec.sigma, size=2)
        cx, cy = obj.hbox.center
        hw, hh = 0.5 * obj.hbox.width * fx, 0.5 * obj.hbox.height * fy
        out.append(replace(obj, hbox=AlignedBox(cx - hw, cy - hh, cx + hw, cy + hh)))
    return Scene(scene.pixels, out, scene.seed)


def noisy_dataset(scenes: list, sigma: float, seed: int) -> list:
    if sigma == 0:
        return list(scenes)
    seeds = scene_seeds(seed + 7919, len(scenes))
    return [apply_annotation_noise(s, NoiseSpec(sigma), sd) for s, sd in zip(scenes, seeds)]


def sample_dataset(scenes: list, pct: float, seed: int) -> list:
    """Exactly ``ceil(pct/100 * N)`` scenes, chosen deterministically from ``seed``."""
    if not 0 < pct <= 100:
        raise InvalidArgumentError(f"sample percentage must be in (0, 100], got {pct}")
    n = len(scenes)
    k = min(n, math.ceil(pct / 100.0 * n - 1e-9))
    idx = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    return [scenes[i] for i in idx]


# ---------------------------------------------------------------- file format
# header: magic(8) version(u32) count(u32); record: length(u64) crc32(u32) payload

_OBJ = struct.Struct("<B5d d4d I")


def _encode_scene(s: Scene) -> bytes:
    h, w = s.pixels.shape
    parts = [struct.pack("<qIII", s.seed, h, w, len(s.objects)), s.pixels.tobytes()]
    for o in s.objects:
        r, hb = o.rbox, o.hbox
        parts.append(_OBJ.pack(SHAPE_KINDS.index(o.shape_kind), r.cx, r.cy, r.w, r.h, r.theta,
                               o.theta_sym, hb.xmin, hb.ymin, hb.xmax, hb.ymax, o.class_id))
    return b"".join(parts)


def _decode_scene(buf: bytes) -> Scene:
    seed, h, w, n = struct.unpack_from("<qIII", buf, 0)
    off = struct.calcsize("<qIII")
    if len(buf) != off + h * w + n * _OBJ.size:
        raise DatasetFormatError("scene record length does not match its header")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
    off += h * w
    objects = []
    for _ in range(n):
        k, cx, cy, bw, bh, th, sym, x0, y0, x1, y1, cid = _OBJ.unpack_from(buf, off)
        off += _OBJ.size
        objects.append(ObjectGT(SHAPE_KINDS[k], OrientedBox(cx, cy, bw, bh, th), sym,
                                AlignedBox(x0, y0, x1, y1), cid))
    return Scene(pixels, objects, seed)


def save_dataset(path, scenes: list) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(scenes)))
        for s in scenes:
            payload = _encode_scene(s)
            f.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
            f.write(payload)


def load_dataset(path) -> list:
    """Read a dataset file; raises rather than returning a partial dataset."""
    data = Path(path).read_bytes()
    head = len(MAGIC) + 8
    if len(data) < head:
        raise TruncatedFileError(f"{path}: file shorter than header")
    if data[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"{path}: not a symbox dataset (bad magic)")
    version, count = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: dataset format version {version}, expected {FORMAT_VERSION}")
    off, scenes = head, []
    for i in range(count):
        if off + 12 > len(data):
            raise TruncatedFileError(f"{path}: truncated before record {i} of {count}")
        length, crc = struct.unpack_from("<QI", data, off)
        off += 12
        if off + length > len(data):
            raise TruncatedFileError(f"{path}: record {i} truncated")
        payload = data[off:off + length]
        off += length
        if zlib.crc32(payload) != crc:
            raise DatasetFormatError(f"{path}: checksum mismatch in record {i}")
        scenes.append(_decode_scene(payload))
    if off != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    return scenes
