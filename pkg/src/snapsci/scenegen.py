"""Procedural synthetic video with exact edge and depth ground truth, plus
ingestion of user-supplied grayscale frame folders.

Objects are hard-silhouette rectangles and disks on constant depth layers
moving at constant velocity; anti-aliasing is deliberately disabled so the
edge ground truth is unambiguous.  Object intensities within a scene are
drawn without replacement from a 0.1-spaced grid, so every silhouette
boundary carries an intensity step of at least 0.1.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ConfigError,
    DataError,
    RandomStream,
    VideoCube,
    derive_stream,
    tensor_read,
    tensor_write,
)

SHAPES = ("rectangle", "disk")
BACKGROUND = 0.05
_INTENSITY_GRID = np.arange(2, 11) / 10.0  # 0.2 .. 1.0, pairwise gaps >= 0.1


@dataclass(frozen=True)
class SceneConfig:
    t: int = 8
    h: int = 32
    w: int = 32
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 3
    shapes: Tuple[str, ...] = SHAPES
    min_size: int = 4
    max_size: int = 10
    min_speed: float = 0.0
    max_speed: float = 1.0
    depth_range: Tuple[float, float] = (1.0, 80.0)
    background: float = BACKGROUND

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ConfigError("scene dims must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if self.max_objects > len(_INTENSITY_GRID):
            raise ConfigError(
                f"at most {len(_INTENSITY_GRID)} objects per scene (distinct intensities)"
            )
        if any(s not in SHAPES for s in self.shapes) or not self.shapes:
            raise ConfigError(f"shapes must be a nonempty subset of {SHAPES}")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError("need 1 <= min_size <= max_size")
        if self.max_size > min(self.h, self.w):
            raise ConfigError(
                f"objects of size {self.max_size} are larger than the "
                f"{self.h}x{self.w} frame"
            )
        if not 0 <= self.min_speed <= self.max_speed <= 3.0:
            raise ConfigError("need 0 <= min_speed <= max_speed <= 3")
        if not 1.0 <= self.depth_range[0] <= self.depth_range[1] <= 80.0:
            raise ConfigError("depth range must lie within [1, 80]")
        if not 0.0 <= self.background < 0.2:
            raise ConfigError("background intensity must lie in [0, 0.2)")


@dataclass(frozen=True)
class SceneObject:
    shape: str  # "rectangle" (pos = top-left, size = (sh, sw)) or "disk" (pos = center)
    pos: Tuple[float, float]
    size: Tuple[float, float]
    velocity: Tuple[float, float]
    intensity: float
    depth: float


@dataclass
class Scene:
    video: VideoCube
    edges: np.ndarray  # (T, H, W) uint8
    depth: np.ndarray  # (T, H, W) float32, 0 where invalid
    valid: np.ndarray  # (T, H, W) uint8
    objects: Tuple[SceneObject, ...] = ()


def _paint(id_map: np.ndarray, obj: SceneObject, index: int, frame: int) -> None:
    h, w = id_map.shape
    py = obj.pos[0] + obj.velocity[0] * frame
    px = obj.pos[1] + obj.velocity[1] * frame
    if obj.shape == "rectangle":
        r0 = int(round(py))
        c0 = int(round(px))
        r1, c1 = r0 + int(obj.size[0]), c0 + int(obj.size[1])
        r0, c0 = max(r0, 0), max(c0, 0)
        r1, c1 = min(r1, h), min(c1, w)
        if r1 > r0 and c1 > c0:
            id_map[r0:r1, c0:c1] = index
    else:
        radius = obj.size[0]
        yy, xx = np.ogrid[:h, :w]
        id_map[(yy - py) ** 2 + (xx - px) ** 2 <= radius**2] = index


def render_scene(objects: Sequence[SceneObject], cfg: SceneConfig) -> Scene:
    """Rasterize objects back-to-front (nearer depth occludes farther).

    Edges mark object-side pixels whose 4-neighborhood crosses a boundary
    against the background or an occluding (nearer) object; the depth map
    holds the front-most object's layer and the background is invalid.
    """
    t, h, w = cfg.t, cfg.h, cfg.w
    order = sorted(range(len(objects)), key=lambda i: -objects[i].depth)
    intensities = np.array([o.intensity for o in objects] + [cfg.background],
                           dtype=np.float32)
    depths = np.array([o.depth for o in objects] + [0.0], dtype=np.float32)
    video = np.empty((t, h, w), dtype=np.float32)
    edges = np.zeros((t, h, w), dtype=np.uint8)
    depth = np.zeros((t, h, w), dtype=np.float32)
    valid = np.zeros((t, h, w), dtype=np.uint8)
    for frame in range(t):
        id_map = np.full((h, w), -1, dtype=np.int32)
        for i in order:
            _paint(id_map, objects[i], i, frame)
        video[frame] = intensities[id_map]
        depth[frame] = depths[id_map]
        valid[frame] = (id_map >= 0).astype(np.uint8)
        e = np.zeros((h, w), dtype=bool)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            here = id_map[max(di, 0) : h + min(di, 0), max(dj, 0) : w + min(dj, 0)]
            there = id_map[max(-di, 0) : h - max(di, 0), max(-dj, 0) : w - max(dj, 0)]
            boundary = (here >= 0) & (
                (there < 0) | ((there != here) & (depths[there] > depths[here]))
            )
            e[max(di, 0) : h + min(di, 0), max(dj, 0) : w + min(dj, 0)] |= boundary
        edges[frame] = e.astype(np.uint8)
    return Scene(
        video=VideoCube(data=video),
        edges=edges,
        depth=depth,
        valid=valid,
        objects=tuple(objects),
    )


def gen_scene(cfg: SceneConfig, stream: Optional[RandomStream] = None) -> Scene:
    """Sample objects deterministically from the config seed and render them."""
    gen = (stream or derive_stream(cfg.seed, "scene")).generator
    n = int(gen.integers(cfg.min_objects, cfg.max_objects + 1))
    picks = gen.permutation(len(_INTENSITY_GRID))[:n]
    objects = []
    for i in range(n):
        shape = cfg.shapes[int(gen.integers(0, len(cfg.shapes)))]
        if shape == "rectangle":
            sh = int(gen.integers(cfg.min_size, cfg.max_size + 1))
            sw = int(gen.integers(cfg.min_size, cfg.max_size + 1))
            pos = (
                float(gen.uniform(0, cfg.h - sh)),
                float(gen.uniform(0, cfg.w - sw)),
            )
            size = (float(sh), float(sw))
        else:
            radius = float(gen.uniform(cfg.min_size / 2, cfg.max_size / 2))
            pos = (
                float(gen.uniform(radius, cfg.h - 1 - radius)),
                float(gen.uniform(radius, cfg.w - 1 - radius)),
            )
            size = (radius, radius)
        speed = float(gen.uniform(cfg.min_speed, cfg.max_speed))
        angle = float(gen.uniform(0.0, 2.0 * np.pi))
        objects.append(
            SceneObject(
                shape=shape,
                pos=pos,
                size=size,
                velocity=(speed * np.sin(angle), speed * np.cos(angle)),
                intensity=float(_INTENSITY_GRID[picks[i]]),
                depth=float(gen.uniform(*cfg.depth_range)),
            )
        )
    return render_scene(objects, cfg)


def gen_dataset(cfg: SceneConfig, n_scenes: int) -> List[Scene]:
    """Generate n scenes with per-scene derived streams."""
    return [
        gen_scene(cfg, stream=derive_stream(cfg.seed, f"scene/{i}"))
        for i in range(n_scenes)
    ]


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------

_SCENE_FILES = ("video", "edges", "depth", "valid")


def save_scene(dir_path, scene: Scene) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    tensor_write(d / "video.cdt", scene.video.data)
    tensor_write(d / "edges.cdt", scene.edges)
    tensor_write(d / "depth.cdt", scene.depth)
    tensor_write(d / "valid.cdt", scene.valid)


def load_scene(dir_path) -> Scene:
    d = Path(dir_path)
    return Scene(
        video=VideoCube(data=tensor_read(d / "video.cdt")),
        edges=tensor_read(d / "edges.cdt"),
        depth=tensor_read(d / "depth.cdt"),
        valid=tensor_read(d / "valid.cdt"),
    )


def save_dataset(dir_path, scenes: Sequence[Scene], config_echo: Dict) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        save_scene(d / f"scene_{i:04d}", scene)
    lines = [f"n_scenes = {len(scenes)}"]
    lines += [f"{k} = {v}" for k, v in config_echo.items()]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(dir_path) -> List[Scene]:
    d = Path(dir_path)
    if not (d / "manifest.txt").exists():
        raise DataError(f"no manifest.txt in dataset directory {d}")
    dirs = sorted(p for p in d.iterdir() if p.is_dir() and p.name.startswith("scene_"))
    if not dirs:
        raise DataError(f"no scene directories in {d}")
    return [load_scene(p) for p in dirs]


# ---------------------------------------------------------------------------
# PGM (P5) frame-folder ingestion
# ---------------------------------------------------------------------------


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # header tokens: width, height, maxval; '#' comments run to end of line
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: malformed PGM header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval > 255:
        raise DataError(f"{path}: maxval {maxval} > 255 is unsupported")
    if maxval < 1:
        raise DataError(f"{path}: maxval must be >= 1")
    pos += 1  # single whitespace after maxval
    payload = data[pos : pos + w * h]
    if len(payload) != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    frame = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return frame.astype(np.float32) / maxval


def ingest_frames(dir_path) -> VideoCube:
    """Load a directory of binary PGM frames (lexicographic order) as a cube."""
    d = Path(dir_path)
    files = sorted(p for p in d.iterdir() if p.is_file())
    if not files:
        raise DataError(f"no frame files in {d}")
    frames = []
    for f in files:
        frame = _read_pgm(f)
        if frames and frame.shape != frames[0].shape:
            raise DataError(
                f"{f}: frame shape {frame.shape} differs from {frames[0].shape}"
            )
        frames.append(frame)
    return VideoCube(data=np.stack(frames))


def write_pgm(path, frame: np.ndarray, maxval: int = 255) -> None:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8 or frame.ndim != 2:
        raise ConfigError("PGM writer takes a 2-d uint8 array")
    h, w = frame.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + frame.tobytes())
