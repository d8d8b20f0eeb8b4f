"""Frame ingestion, geometry ops, and the synthetic frame generator.

Images are numpy arrays of shape (height, width, 3), dtype uint8, row-major.
PNG is the only supported codec: frames are rendered plots, so a lossless
universal format is all we need.

The synthetic generator stands in for real renderings at desk scale. It draws
an entropy-style convective blob (noisy shell around an ordered core, mapped
through a fixed color table) and can inject a thin bright ray escaping the
shell at a configurable angle from the zenith - the anomaly signature the
detectors are trained to flag. Generation is a pure function of
(config, seed): identical inputs give bit-identical frames, and the anomalous
variant of a frame differs from its clean twin only inside the ray's bounding
box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, FormatError, RegionOutOfBounds
from .seeding import derive_seed

VALID = 1
ANOMALOUS = -1

FLIP_AXES = ("horizontal", "vertical", "both")


@dataclass(frozen=True)
class CropRegion:
    """Inclusive pixel bounds: columns x_lo..x_hi, rows y_lo..y_hi."""

    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int

    def __post_init__(self):
        if self.x_lo < 0 or self.y_lo < 0 or self.x_lo > self.x_hi or self.y_lo > self.y_hi:
            raise RegionOutOfBounds(f"inconsistent crop region {self}")

    @property
    def width(self) -> int:
        return self.x_hi - self.x_lo + 1

    @property
    def height(self) -> int:
        return self.y_hi - self.y_lo + 1


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of one synthetic frame.

    canvas is (height, width). Blob geometry is expressed as fractions of the
    smaller canvas dimension so configs port across resolutions; the ray is in
    pixels, with None meaning "scale with the canvas". The default ray angle of
    45 degrees from the zenith matches the observed anomaly geometry.
    """

    canvas: tuple[int, int] = (96, 128)
    center: tuple[float, float] = (0.55, 0.50)  # (row, col) as canvas fractions
    core_radius_frac: float = 0.16
    shell_radius_frac: float = 0.34
    lobe_amp: float = 0.07
    noise_amp: float = 0.015
    ray_angle_deg: float = 45.0
    ray_length_px: float | None = None
    ray_width_px: float | None = None
    ray_intensity: float = 0.98
    anomaly: bool = False
    seed: int = 0
    # The convective texture has its own stream so a frame sequence can model
    # either an evolving interior (fresh texture per frame) or a deterministic
    # renderer where only the shell geometry moves (shared texture).
    texture_seed: int = 0


def load_image(path: Path | str) -> np.ndarray:
    """Decode a PNG into an (h, w, 3) uint8 tensor.

    Grayscale and paletted inputs are expanded to RGB; an alpha channel is
    dropped. Raises FileNotFoundError for missing paths and DecodeError for
    files that exist but do not decode.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def save_image(img: np.ndarray, path: Path | str) -> None:
    img = _check_image(img)
    Image.fromarray(img, mode="RGB").save(Path(path), format="PNG")


def crop(img: np.ndarray, region: CropRegion) -> np.ndarray:
    img = _check_image(img)
    h, w = img.shape[:2]
    if region.x_hi >= w or region.y_hi >= h:
        raise RegionOutOfBounds(
            f"region x[{region.x_lo},{region.x_hi}] y[{region.y_lo},{region.y_hi}] "
            f"exceeds {h}x{w} image"
        )
    return img[region.y_lo : region.y_hi + 1, region.x_lo : region.x_hi + 1].copy()


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel center alignment.

    Resizing to the source dimensions reproduces the input exactly.
    """
    img = _check_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be >= 1, got {out_h}x{out_w}")
    out = _bilinear(img.astype(np.float64), out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    """Mirror the image: horizontal reverses columns, vertical reverses rows."""
    img = _check_image(img)
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1, :].copy()
    if axis == "both":
        return img[::-1, ::-1].copy()
    raise ValueError(f"axis must be one of {FLIP_AXES}, got {axis!r}")


def flatten(img: np.ndarray) -> np.ndarray:
    """One feature row per image: row-major, channel-fastest, scaled to [0, 1].

    The ordering is part of the on-disk feature contract and must not change.
    """
    img = _check_image(img)
    return img.reshape(-1).astype(np.float64) / 255.0


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 3) uint8 image, got shape {img.shape} dtype {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have at least one pixel")
    return img


def _bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable 2-tap bilinear interpolation on a float (h, w[, c]) array."""

    def axis_coords(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, rf = axis_coords(arr.shape[0], out_h)
    c0, c1, cf = axis_coords(arr.shape[1], out_w)
    rf = rf.reshape(-1, *([1] * (arr.ndim - 1)))
    rows = arr[r0] * (1.0 - rf) + arr[r1] * rf
    cf = cf.reshape(1, -1, *([1] * (arr.ndim - 2)))
    return rows[:, c0] * (1.0 - cf) + rows[:, c1] * cf


# Color anchors for the entropy-style map: (field value, R, G, B).
_COLOR_STOPS = np.array(
    [
        [0.00, 18, 10, 58],
        [0.25, 34, 64, 172],
        [0.50, 44, 170, 152],
        [0.70, 224, 196, 64],
        [0.85, 238, 106, 32],
        [1.00, 255, 244, 224],
    ],
    dtype=np.float64,
)


def _colorize(field: np.ndarray) -> np.ndarray:
    """Map a [0, 1] scalar field through the fixed color table."""
    v = np.clip(field, 0.0, 1.0).ravel()
    channels = [np.interp(v, _COLOR_STOPS[:, 0], _COLOR_STOPS[:, 1 + c]) for c in range(3)]
    rgb = np.stack(channels, axis=-1).reshape(*field.shape, 3)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _ray_geometry(cfg: SynthConfig):
    """Start/end points and half-width of the injected ray, in pixel coords."""
    h, w = cfg.canvas
    scale = min(h, w)
    length = cfg.ray_length_px if cfg.ray_length_px is not None else 0.36 * scale
    width = cfg.ray_width_px if cfg.ray_width_px is not None else max(3.0, scale / 32.0)
    cy, cx = cfg.center[0] * h, cfg.center[1] * w
    theta = math.radians(cfg.ray_angle_deg)
    dy, dx = -math.cos(theta), math.sin(theta)  # zenith = up, positive toward +x
    r0 = 0.85 * cfg.shell_radius_frac * scale
    sy, sx = cy + r0 * dy, cx + r0 * dx
    ey, ex = sy + length * dy, sx + length * dx
    return (sy, sx), (ey, ex), width / 2.0


def ray_bounding_box(cfg: SynthConfig) -> CropRegion:
    """Smallest crop region that contains every pixel the ray can touch."""
    (sy, sx), (ey, ex), half = _ray_geometry(cfg)
    h, w = cfg.canvas
    margin = half + 1.0  # soft edge extends half a pixel past the capsule
    y_lo = max(0, int(math.floor(min(sy, ey) - margin)))
    y_hi = min(h - 1, int(math.ceil(max(sy, ey) + margin)))
    x_lo = max(0, int(math.floor(min(sx, ex) - margin)))
    x_hi = min(w - 1, int(math.ceil(max(sx, ex) + margin)))
    return CropRegion(x_lo=x_lo, x_hi=x_hi, y_lo=y_lo, y_hi=y_hi)


def synth_image(cfg: SynthConfig) -> tuple[np.ndarray, int]:
    """Render one synthetic frame; returns (image, label).

    Label is +1 for a clean frame, -1 when the ray is injected. The scalar
    field is built identically for both variants (the RNG is consumed the same
    way), then the ray is composited on top, so a config's clean and anomalous
    twins differ only inside ray_bounding_box(cfg).
    """
    h, w = cfg.canvas
    if h < 8 or w < 8:
        raise ValueError(f"canvas too small: {cfg.canvas}")
    rng = np.random.default_rng(cfg.seed)

    cy, cx = cfg.center[0] * h, cfg.center[1] * w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    theta = np.arctan2(dx, -dy)

    phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
    lobes = (
        np.sin(3.0 * theta + phases[0])
        + 0.6 * np.sin(5.0 * theta + phases[1])
        + 0.4 * np.sin(2.0 * theta + phases[2])
    )
    scale = min(h, w)
    r_shell = cfg.shell_radius_frac * scale * (1.0 + cfg.lobe_amp * lobes)
    r_core = cfg.core_radius_frac * scale

    # Smooth turbulence: a coarse noise grid upsampled to the canvas.
    tex_rng = np.random.default_rng(cfg.texture_seed)
    grid = tex_rng.standard_normal((h // 8 + 2, w // 8 + 2))
    turbulence = _bilinear(grid, h, w)

    background = 0.10
    shell_value = 0.62 + 0.12 * turbulence
    core_value = 0.30
    edge = 2.0
    w_shell = _smoothstep((r_shell - r) / edge + 0.5)
    w_core = _smoothstep((r_core - r) / edge + 0.5)
    field = background + w_shell * (shell_value - background) + w_core * (core_value - shell_value)
    if cfg.noise_amp > 0.0:
        field += rng.normal(0.0, cfg.noise_amp, size=(h, w))
    # Valid frames never reach the top of the color range; the ray does.
    field = np.clip(field, 0.0, 0.90)

    if cfg.anomaly:
        (sy, sx), (ey, ex), half = _ray_geometry(cfg)
        field = _composite_ray(field, (sy, sx), (ey, ex), half, cfg.ray_intensity)

    label = ANOMALOUS if cfg.anomaly else VALID
    return _colorize(field), label


def _composite_ray(field, start, end, half_width, intensity):
    """Blend a capsule of the given intensity over the field (soft 1px edge)."""
    h, w = field.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy, sx = start
    ey, ex = end
    vy, vx = ey - sy, ex - sx
    seg_sq = vy * vy + vx * vx
    t = np.clip(((yy - sy) * vy + (xx - sx) * vx) / max(seg_sq, 1e-12), 0.0, 1.0)
    dist = np.hypot(yy - (sy + t * vy), xx - (sx + t * vx))
    alpha = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
    return field * (1.0 - alpha) + intensity * alpha


def write_manifest(path: Path | str, entries: Iterable[tuple[str, int]]) -> None:
    """Write `<relative-path>,<label>` lines, one per image."""
    lines = []
    for rel, label in entries:
        if label not in (VALID, ANOMALOUS):
            raise ValueError(f"label must be 1 or -1, got {label}")
        lines.append(f"{rel},{label}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: Path | str) -> list[tuple[Path, int]]:
    """Parse a manifest; image paths are resolved relative to the manifest."""
    path = Path(path)
    base = path.parent
    entries: list[tuple[Path, int]] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        rel, sep, label_text = line.rpartition(",")
        if not sep or not rel:
            raise FormatError(f"{path}:{lineno}: expected '<path>,<label>'")
        try:
            label = int(label_text)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad label {label_text!r}") from exc
        if label not in (VALID, ANOMALOUS):
            raise FormatError(f"{path}:{lineno}: label must be 1 or -1")
        entries.append((base / rel, label))
    return entries


def generate_dataset(
    out_dir: Path | str,
    n_valid: int,
    n_anomalous: int,
    seed: int,
    base: SynthConfig = SynthConfig(),
    drift: float = 0.06,
    anomalous_positions: Sequence[int] | None = None,
    evolve_texture: bool = True,
) -> Path:
    """Render a frame sequence to out_dir and return the manifest path.

    Frames mimic a slowly evolving run: each gets its own derived seed and the
    shell radius grows linearly by `drift` over the sequence. By default the
    anomalous frames form the tail of the sequence (a single late failure);
    pass 1-based `anomalous_positions` to place them elsewhere, e.g. a lone
    mid-stream anomaly for online-harness experiments. With
    evolve_texture=False the convective texture is shared by every frame, so
    all frame-to-frame variation comes from the moving shell geometry.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = n_valid + n_anomalous
    if anomalous_positions is None:
        anomalous = set(range(n_valid + 1, n + 1))
    else:
        anomalous = set(int(i) for i in anomalous_positions)
        if len(anomalous) != n_anomalous or any(i < 1 or i > n for i in anomalous):
            raise ValueError("anomalous_positions must be n_anomalous distinct indices in 1..n")

    entries = []
    for i in range(1, n + 1):
        cfg = frame_config(
            base,
            index=i,
            n_frames=n,
            base_seed=seed,
            anomaly=(i in anomalous),
            drift=drift,
            evolve_texture=evolve_texture,
        )
        img, label = synth_image(cfg)
        name = f"frame_{i:05d}.png"
        save_image(img, out_dir / name)
        entries.append((name, label))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def frame_config(
    base: SynthConfig,
    index: int,
    n_frames: int,
    base_seed: int,
    anomaly: bool,
    drift: float = 0.06,
    evolve_texture: bool = True,
) -> SynthConfig:
    """Per-frame config: derived seed plus slow shell growth across the run."""
    growth = drift * (index - 1) / max(n_frames - 1, 1)
    texture_index = index if evolve_texture else 0
    return replace(
        base,
        seed=derive_seed(base_seed, index),
        anomaly=anomaly,
        shell_radius_frac=base.shell_radius_frac * (1.0 + growth),
        texture_seed=derive_seed(base_seed, texture_index, 1),
    )
