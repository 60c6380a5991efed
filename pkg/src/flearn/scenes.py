"""Circle + square structure scenes split into overlapping fragments.

The target is a binary [1,M,N] mask.  It is cut into a rows x cols grid
of tiles; every tile is grown by ``overlap`` pixels across interior edges
and fragment k is the mask restricted to grown tile k.  Fragments are
stacked row-major into a [K,M,N] model input.

On disk a scene is a directory with ``target.pgm``, ``fragment_XX.pgm``
(8-bit binary PGM, 0/255) and ``scene.json``:

    {"format": "flearn-scene", "version": 1,
     "config": {...SceneConfig fields...},
     "target": "target.pgm",
     "fragments": ["fragment_00.pgm", ...]}
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCENE_FORMAT = "flearn-scene"
SCENE_VERSION = 1


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    size: int = 128
    circle_cx: int = 52
    circle_cy: int = 56
    circle_r: int = 30
    square_top: int = 48
    square_left: int = 60
    square_side: int = 48
    grid_rows: int = 2
    grid_cols: int = 2
    overlap: int = 8
    filled: bool = False
    thickness: int = 3

    @property
    def n_fragments(self) -> int:
        return self.grid_rows * self.grid_cols

    def validate(self) -> None:
        n = self.size
        if n < 2:
            raise SceneError(f"size must be >= 2, got {n}")
        if self.circle_r < 0 or self.square_side < 1:
            raise SceneError("circle radius must be >= 0 and square side >= 1")
        if not (self.circle_r <= self.circle_cx < n - self.circle_r
                and self.circle_r <= self.circle_cy < n - self.circle_r):
            raise SceneError(f"circle (c=({self.circle_cx},{self.circle_cy}), r={self.circle_r}) "
                             f"leaves the {n}x{n} image")
        if not (0 <= self.square_top and self.square_top + self.square_side <= n
                and 0 <= self.square_left and self.square_left + self.square_side <= n):
            raise SceneError(f"square at ({self.square_top},{self.square_left}) side {self.square_side} "
                             f"leaves the {n}x{n} image")
        if self.overlap < 1:
            raise SceneError("overlap must be >= 1 pixel: neighbouring fragments have to overlap")
        if self.grid_rows < 1 or self.grid_cols < 1 or self.n_fragments < 2:
            raise SceneError(f"grid {self.grid_rows}x{self.grid_cols} must give at least 2 fragments")
        if self.grid_rows > n or self.grid_cols > n:
            raise SceneError("grid finer than the image")
        if not self.filled and self.thickness < 1:
            raise SceneError("outline thickness must be >= 1")


@dataclass
class FragmentScene:
    target: np.ndarray      # [1,M,N] float64 in {0,1}
    fragments: np.ndarray   # [K,M,N] float64 in {0,1}
    config: SceneConfig = field(default_factory=SceneConfig)

    @property
    def n_fragments(self) -> int:
        return self.fragments.shape[0]


def _circle_mask(cfg: SceneConfig) -> np.ndarray:
    yy, xx = np.mgrid[: cfg.size, : cfg.size]
    d2 = (xx - cfg.circle_cx) ** 2 + (yy - cfg.circle_cy) ** 2
    inside = d2 <= cfg.circle_r ** 2
    if cfg.filled:
        return inside
    inner = max(cfg.circle_r - cfg.thickness, 0)
    return inside & (d2 > inner ** 2) if cfg.circle_r > cfg.thickness else inside


def _square_mask(cfg: SceneConfig) -> np.ndarray:
    m = np.zeros((cfg.size, cfg.size), dtype=bool)
    t, l, s = cfg.square_top, cfg.square_left, cfg.square_side
    m[t:t + s, l:l + s] = True
    if not cfg.filled and s > 2 * cfg.thickness:
        k = cfg.thickness
        m[t + k:t + s - k, l + k:l + s - k] = False
    return m


def render_structure(cfg: SceneConfig) -> np.ndarray:
    """Binary union of circle and square as a [1,M,N] float array."""
    cfg.validate()
    return (_circle_mask(cfg) | _square_mask(cfg)).astype(np.float64)[None]


def _edges(n: int, parts: int) -> list[int]:
    return [i * n // parts for i in range(parts + 1)]


def tile_bounds(cfg: SceneConfig) -> list[tuple[int, int, int, int]]:
    """Grown (row0, row1, col0, col1) half-open boxes, row-major."""
    n, o = cfg.size, cfg.overlap
    re, ce = _edges(n, cfg.grid_rows), _edges(n, cfg.grid_cols)
    boxes = []
    for i in range(cfg.grid_rows):
        for j in range(cfg.grid_cols):
            boxes.append((max(re[i] - o, 0), min(re[i + 1] + o, n),
                          max(ce[j] - o, 0), min(ce[j + 1] + o, n)))
    return boxes


def decompose(mask: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """Split a [1,M,N] (or [M,N]) binary mask into [K,M,N] overlapping fragments."""
    m = np.asarray(mask, dtype=np.float64).reshape(cfg.size, cfg.size)
    if not np.isin(m, (0.0, 1.0)).all():
        raise SceneError("mask must be binary")
    boxes = tile_bounds(cfg)
    if cfg.n_fragments > 1 and any(b == (0, cfg.size, 0, cfg.size) for b in boxes):
        warnings.warn(f"overlap {cfg.overlap} makes a tile cover the whole image; "
                      "fragments degenerate toward copies of the mask", stacklevel=2)
    out = np.zeros((len(boxes), cfg.size, cfg.size))
    for k, (r0, r1, c0, c1) in enumerate(boxes):
        out[k, r0:r1, c0:c1] = m[r0:r1, c0:c1]
    return out


def make_scene(cfg: SceneConfig | None = None) -> FragmentScene:
    cfg = cfg or SceneConfig()
    target = render_structure(cfg)
    return FragmentScene(target, decompose(target, cfg), cfg)


def downscale_config(cfg: SceneConfig, size: int) -> SceneConfig:
    """Same layout scaled to a smaller canvas (used for cheap gradient checks)."""
    f = size / cfg.size

    def s(v):
        return int(round(v * f))

    r = max(s(cfg.circle_r), 1)
    out = SceneConfig(size=size, circle_r=r,
                      circle_cx=min(max(s(cfg.circle_cx), r), size - 1 - r),
                      circle_cy=min(max(s(cfg.circle_cy), r), size - 1 - r),
                      square_side=max(s(cfg.square_side), 1),
                      grid_rows=cfg.grid_rows, grid_cols=cfg.grid_cols,
                      overlap=max(s(cfg.overlap), 1), filled=cfg.filled,
                      thickness=max(s(cfg.thickness), 1))
    out.square_top = min(s(cfg.square_top), size - out.square_side)
    out.square_left = min(s(cfg.square_left), size - out.square_side)
    return out


# --------------------------------------------------------------------------
# PGM + manifest IO


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary P5 with maxval 255."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"write_pgm expects a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise SceneError(f"{path.name}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise SceneError(f"{path.name}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise SceneError(f"{path.name}: malformed PGM header") from exc
    if maxval != 255:
        raise SceneError(f"{path.name}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte after maxval
    data = buf[pos:]
    if len(data) != w * h:
        raise SceneError(f"{path.name}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def _to_u8(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) * 255).astype(np.uint8)


def _from_u8(img: np.ndarray, name: str) -> np.ndarray:
    if not np.isin(img, (0, 255)).all():
        raise SceneError(f"{name}: scene images must be binary (0/255)")
    return (img == 255).astype(np.float64)


def save_scene(scene: FragmentScene, path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    frag_names = [f"fragment_{k:02d}.pgm" for k in range(scene.n_fragments)]
    write_pgm(d / "target.pgm", _to_u8(scene.target[0]))
    for k, name in enumerate(frag_names):
        write_pgm(d / name, _to_u8(scene.fragments[k]))
    manifest = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "config": asdict(scene.config),
        "target": "target.pgm",
        "fragments": frag_names,
    }
    (d / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_scene(path) -> FragmentScene:
    d = Path(path)
    mpath = d / "scene.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise SceneError(f"{mpath}: manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("format") != SCENE_FORMAT or manifest.get("version") != SCENE_VERSION:
        raise SceneError(f"{mpath}: unsupported format/version")
    try:
        cfg = SceneConfig(**manifest["config"])
    except TypeError as exc:
        raise SceneError(f"{mpath}: bad config block ({exc})") from exc
    names = manifest.get("fragments", [])
    if len(names) != cfg.n_fragments:
        raise SceneError(f"{mpath}: config implies {cfg.n_fragments} fragments, "
                         f"manifest lists {len(names)}")
    target = _from_u8(read_pgm(d / manifest["target"]), manifest["target"])
    frags = []
    for name in names:
        fp = d / name
        if not fp.exists():
            raise SceneError(f"{name}: fragment file missing")
        img = read_pgm(fp)
        if img.shape != target.shape:
            raise SceneError(f"{name}: shape {img.shape} != target {target.shape}")
        frags.append(_from_u8(img, name))
    if target.shape != (cfg.size, cfg.size):
        raise SceneError(f"{manifest['target']}: shape {target.shape} != configured size {cfg.size}")
    return FragmentScene(target[None], np.stack(frags), cfg)
