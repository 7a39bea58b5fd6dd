"""Synthetic videos with independent scene/motion factors, two-view sampling and
static/dynamic input decoupling.

Scenes are class-specific background textures (stripe/checker/blob pattern times a
warm or cool palette) with per-video phase, color and fine-grain variation. Motions
are class-specific trajectories of a single fixed-appearance sprite. Both label sets
are chosen to be invariant under horizontal flips, because flips are sampled
independently for the two views of a video.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .config import AugmentConfig, ConfigError, SynthConfig
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

SCENE_NAMES = [
    "warm_hstripes", "warm_vstripes", "warm_checker", "warm_blobs",
    "cool_hstripes", "cool_vstripes", "cool_checker", "cool_blobs",
]
MOTION_NAMES = [
    "up_slow", "down_slow", "up_fast", "down_fast",
    "oscillate_x", "oscillate_y", "circle", "sideways",
]
_PALETTES = np.array([
    [[0.55, 0.25, 0.15], [0.75, 0.55, 0.20]],
    [[0.10, 0.25, 0.50], [0.20, 0.55, 0.60]],
])
_SPRITE_COLOR = np.array([0.95, 0.95, 0.95])

FORMAT_VERSION = 1


@dataclass
class VideoClip:
    pixels: np.ndarray  # float32 [C, F, H, W] in [0, 1]
    video_id: int
    scene_id: int
    motion_id: int

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[0] != 3:
            raise ShapeError(f"expected [3, F, H, W] pixels, got {self.pixels.shape}")
        if self.pixels.shape[1] < 2:
            raise ShapeError("a clip needs at least 2 frames")


@dataclass
class DecoupledTriplet:
    v: torch.Tensor
    s: torch.Tensor
    d: torch.Tensor
    t_static: int


@dataclass
class ViewPair:
    view_i: DecoupledTriplet
    view_j: DecoupledTriplet
    video_id: int
    starts: tuple[int, int]


# ---------------------------------------------------------------------------
# generation


def label_table(cfg: SynthConfig) -> np.ndarray:
    """(scene_id, motion_id) per video.

    Labels are laid out as shuffled full-factorial blocks so the joint distribution
    is the product of the marginals and every cell is covered once
    ``num_videos >= scenes * motions``.
    """
    rng = np.random.default_rng([cfg.seed, 0xABE1])
    cells = np.array([(s, m) for s in range(cfg.num_scene_classes) for m in range(cfg.num_motion_classes)])
    blocks = []
    remaining = cfg.num_videos
    while remaining > 0:
        perm = rng.permutation(len(cells))
        blocks.append(cells[perm[:remaining]])
        remaining -= len(cells)
    if not blocks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(blocks).astype(np.int64)


def _trajectory(motion_id: int, n_frames: int, size: int, rng: np.random.Generator) -> np.ndarray:
    jit = rng.uniform(0.8, 1.2)
    x0, y0 = rng.uniform(0, size, 2)
    t = np.arange(n_frames, dtype=np.float64)
    x = np.full(n_frames, x0)
    y = np.full(n_frames, y0)
    if motion_id in (0, 1, 2, 3):
        speed = (2.0 if motion_id < 2 else 4.0) * jit
        y = y0 + (-speed if motion_id % 2 == 0 else speed) * t
    elif motion_id in (4, 5):
        phase = rng.uniform(0, 2 * math.pi)
        off = 8.0 * jit * np.sin(2 * math.pi * t / 8.0 + phase)
        if motion_id == 4:
            x = x0 + off
        else:
            y = y0 + off
    elif motion_id == 6:
        phase = rng.uniform(0, 2 * math.pi)
        direction = rng.choice([-1.0, 1.0])
        ang = phase + direction * 2 * math.pi * t / 12.0
        x = x0 + 8.0 * jit * np.cos(ang)
        y = y0 + 8.0 * jit * np.sin(ang)
    elif motion_id == 7:
        x = x0 + rng.choice([-1.0, 1.0]) * 3.0 * jit * t
    else:
        raise ConfigError("num_motion_classes", f"no motion pattern for id {motion_id}")
    return np.stack([x % size, y % size], axis=1)


def _background(scene_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    pattern, palette = scene_id % 4, scene_id // 4
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wavelength = 12.0 * rng.uniform(0.85, 1.15)
    ph1, ph2 = rng.uniform(0, 2 * math.pi, 2)
    if pattern == 0:
        p = 0.5 + 0.5 * np.sin(2 * math.pi * yy / wavelength + ph1)
    elif pattern == 1:
        p = 0.5 + 0.5 * np.sin(2 * math.pi * xx / wavelength + ph1)
    elif pattern == 2:
        p = 0.5 + 0.5 * np.tanh(3 * np.sin(2 * math.pi * xx / wavelength + ph1) * np.sin(2 * math.pi * yy / wavelength + ph2))
    else:
        p = gaussian_filter(rng.standard_normal((size, size)), sigma=4.0, mode="wrap")
        p = (p - p.min()) / (p.max() - p.min() + 1e-12)
    c1, c2 = _PALETTES[palette] + rng.uniform(-0.05, 0.05, (2, 3))
    bg = c1[:, None, None] * (1 - p) + c2[:, None, None] * p
    # fixed fine-grain texture: per-video identity cue shared by all frames
    bg = bg + 0.04 * rng.standard_normal((1, size, size))
    return bg


def _sprite_alpha(center: np.ndarray, size: int, radius: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64)
    dx = np.abs(coords[None, :] - center[0])
    dy = np.abs(coords[:, None] - center[1])
    dx = np.minimum(dx, size - dx)
    dy = np.minimum(dy, size - dy)
    dist = np.sqrt(dx**2 + dy**2)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def render_video(cfg: SynthConfig, video_id: int, scene_id: int, motion_id: int) -> np.ndarray:
    """Pure function of (cfg, video_id, labels). Returns uint8 [3, F, H, W]."""
    rng = np.random.default_rng([cfg.seed, video_id])
    size, n = cfg.spatial_size, cfg.frames_per_video
    bg = _background(scene_id, size, rng)
    traj = _trajectory(motion_id, n, size, rng)
    frames = np.empty((3, n, size, size))
    for t in range(n):
        a = _sprite_alpha(traj[t], size, cfg.sprite_size / 2)
        frames[:, t] = bg * (1 - a) + _SPRITE_COLOR[:, None, None] * a
    if cfg.noise_std > 0:
        frames += cfg.noise_std * rng.standard_normal(frames.shape)
    return np.clip(np.round(frames * 255), 0, 255).astype(np.uint8)


class SynthDataset:
    """In-memory dataset: uint8 pixels [N, 3, F, H, W] plus labels and stats."""

    def __init__(self, cfg: SynthConfig, pixels: np.ndarray, labels: np.ndarray,
                 mean: np.ndarray | None = None, std: np.ndarray | None = None):
        self.cfg = cfg
        self.pixels = pixels
        self.labels = labels
        if mean is None or std is None:
            mean, std = channel_stats(pixels)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def scene_ids(self) -> np.ndarray:
        return self.labels[:, 0]

    @property
    def motion_ids(self) -> np.ndarray:
        return self.labels[:, 1]

    @property
    def action_ids(self) -> np.ndarray:
        return self.labels[:, 0] * self.cfg.num_motion_classes + self.labels[:, 1]

    def clip(self, i: int) -> VideoClip:
        return VideoClip(self.pixels[i].astype(np.float32) / 255.0, i, int(self.labels[i, 0]), int(self.labels[i, 1]))

    def clips(self) -> list[VideoClip]:
        return [self.clip(i) for i in range(len(self))]

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.cfg.seed,
            "config": asdict(self.cfg),
            "num_videos": len(self),
            "pixel_layout": "uint8 [video, channel, frame, height, width], value/255 in [0, 1]",
            "scene_names": SCENE_NAMES[: self.cfg.num_scene_classes],
            "motion_names": MOTION_NAMES[: self.cfg.num_motion_classes],
            "labels": {"scene_id": self.scene_ids.tolist(), "motion_id": self.motion_ids.tolist()},
            "normalization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
        }

    def save(self, out_dir: str | Path, split: str = "train") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        arr_path = out_dir / f"{split}.npz"
        man_path = out_dir / f"{split}.json"
        np.savez_compressed(arr_path, pixels=self.pixels, labels=self.labels)
        man_path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return arr_path, man_path

    @classmethod
    def load(cls, data_dir: str | Path, split: str = "train") -> "SynthDataset":
        data_dir = Path(data_dir)
        manifest = json.loads((data_dir / f"{split}.json").read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported dataset format {manifest.get('format_version')}")
        with np.load(data_dir / f"{split}.npz") as z:
            pixels, labels = z["pixels"], z["labels"]
        cfg = SynthConfig(**manifest["config"])
        norm = manifest["normalization"]
        return cls(cfg, pixels, labels, norm["mean"], norm["std"])


def channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(pixels) == 0:
        return np.full(3, 0.5), np.full(3, 0.25)
    x = pixels.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3, 4))
    std = x.std(axis=(0, 2, 3, 4))
    return mean, np.maximum(std, 1e-6)


def generate_dataset(cfg: SynthConfig) -> list[VideoClip]:
    return build_dataset(cfg).clips()


def build_dataset(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    labels = label_table(cfg)
    shape = (cfg.num_videos, 3, cfg.frames_per_video, cfg.spatial_size, cfg.spatial_size)
    pixels = np.empty(shape, dtype=np.uint8)
    for vid in range(cfg.num_videos):
        pixels[vid] = render_video(cfg, vid, int(labels[vid, 0]), int(labels[vid, 1]))
    return SynthDataset(cfg, pixels, labels)


# ---------------------------------------------------------------------------
# decoupling


def make_static(clip, t: int):
    """Repeat frame ``t`` (0-based) along the time axis (axis -3)."""
    n = clip.shape[-3]
    if not 0 <= t < n:
        raise IndexError(f"static frame index {t} out of range for {n} frames")
    return clip[..., [t] * n, :, :]


def make_difference(clip):
    """Adjacent-frame difference along the time axis; output has one frame fewer."""
    if clip.ndim < 3 or clip.shape[-3] < 2:
        raise ShapeError(f"need at least 2 frames on axis -3, got shape {tuple(clip.shape)}")
    return clip[..., 1:, :, :] - clip[..., :-1, :, :]


def reconstruct_clip(first_frame, d):
    """Inverse of :func:`make_difference` given the first frame."""
    if tuple(first_frame.shape) != tuple(d.shape[:-3]) + tuple(d.shape[-2:]):
        raise ShapeError(f"first frame {tuple(first_frame.shape)} incompatible with differences {tuple(d.shape)}")
    if isinstance(d, torch.Tensor):
        first = first_frame.unsqueeze(-3)
        return torch.cat([first, first + torch.cumsum(d, dim=-3)], dim=-3)
    first = np.expand_dims(first_frame, -3)
    return np.concatenate([first, first + np.cumsum(d, axis=-3)], axis=-3)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugParams:
    top: int
    left: int
    height: int
    width: int
    out_size: int
    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    blur_sigma: float = 0.0

    @classmethod
    def identity(cls, height: int, width: int) -> "AugParams":
        return cls(0, 0, height, width, out_size=height)


def sample_augmentation(rng: np.random.Generator, height: int, width: int, cfg: AugmentConfig) -> AugParams:
    if cfg.crop_size > min(height, width) * 4:
        raise ConfigError("crop_size", "output size is implausibly large for the frame")
    area = height * width
    h = w = min(height, width)
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= width and 0 < ch <= height:
            h, w = ch, cw
            break
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    p = AugParams(top, left, h, w, cfg.crop_size, flip=bool(rng.random() < cfg.flip_prob))
    if rng.random() < cfg.jitter_prob:
        p.brightness = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness))
        p.contrast = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast))
        p.saturation = float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation))
    if rng.random() < cfg.blur_prob:
        p.blur_sigma = float(rng.uniform(*cfg.blur_sigma))
    return p


def apply_geometric(window: torch.Tensor, p: AugParams) -> torch.Tensor:
    """Same crop rectangle, resize and flip for every frame of a [C, T, H, W] window."""
    _, _, H, W = window.shape
    if p.top < 0 or p.left < 0 or p.top + p.height > H or p.left + p.width > W:
        raise ConfigError("crop", f"crop {p.height}x{p.width}@({p.top},{p.left}) exceeds {H}x{W} frame")
    x = window[:, :, p.top:p.top + p.height, p.left:p.left + p.width]
    if (p.height, p.width) != (p.out_size, p.out_size):
        x = F.interpolate(x, size=(p.out_size, p.out_size), mode="bilinear", align_corners=False, antialias=True)
    if p.flip:
        x = torch.flip(x, dims=[-1])
    return x


def _gaussian_kernel(sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(2 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def apply_photometric(window: torch.Tensor, p: AugParams) -> torch.Tensor:
    x = window
    if p.brightness != 1.0:
        x = x * p.brightness
    if p.contrast != 1.0:
        m = _gray(x).mean()
        x = (x - m) * p.contrast + m
    if p.saturation != 1.0:
        g = _gray(x).unsqueeze(0)
        x = g + (x - g) * p.saturation
    x = x.clamp(0.0, 1.0)
    if p.blur_sigma > 0:
        k = _gaussian_kernel(p.blur_sigma).to(x.dtype)
        C, T, H, W = x.shape
        r = (len(k) - 1) // 2
        flat = x.reshape(C * T, 1, H, W)
        flat = F.conv2d(F.pad(flat, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1))
        flat = F.conv2d(F.pad(flat, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1))
        x = flat.reshape(C, T, H, W)
    return x


def _gray(x: torch.Tensor) -> torch.Tensor:
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def augment_consistent(window: torch.Tensor, rng: np.random.Generator, cfg: AugmentConfig,
                       params: AugParams | None = None) -> torch.Tensor:
    """Temporally consistent crop/flip/color/blur of a [C, T+1, H, W] window."""
    if params is None:
        params = sample_augmentation(rng, window.shape[-2], window.shape[-1], cfg)
    return apply_photometric(apply_geometric(window, params), params)


# ---------------------------------------------------------------------------
# views


def _norm_tensors(mean, std) -> tuple[torch.Tensor, torch.Tensor]:
    m = torch.as_tensor(np.asarray(mean), dtype=torch.float32).view(3, 1, 1, 1)
    s = torch.as_tensor(np.asarray(std), dtype=torch.float32).view(3, 1, 1, 1)
    return m, s


def decouple_window(window: torch.Tensor, params: AugParams, t_static: int, mean, std) -> DecoupledTriplet:
    """Build (v, s, d) from a raw [C, T+1, H, W] window.

    d comes from the geometrically augmented, photometrically raw window; v and s
    share the view's photometric transform. All three are normalized with the
    dataset statistics (d only by the std, the mean cancels).
    """
    m, sd = _norm_tensors(mean, std)
    geo = apply_geometric(window, params)
    rgb = (apply_photometric(geo, params) - m) / sd
    v = rgb[:, :-1]
    return DecoupledTriplet(v=v, s=make_static(v, t_static), d=make_difference(geo) / sd, t_static=t_static)


def sample_starts(n_frames: int, T: int, rng: np.random.Generator) -> tuple[int, int]:
    n_starts = n_frames - T
    if n_starts < 1:
        raise DataError(f"clip has {n_frames} frames, need at least {T + 1}")
    if n_starts == 1:
        return 0, 0
    a, b = rng.choice(n_starts, size=2, replace=False)
    return int(a), int(b)


def sample_two_views(clip: VideoClip, T: int, rng: np.random.Generator, aug: AugmentConfig,
                     mean: Sequence[float] = (0.0, 0.0, 0.0), std: Sequence[float] = (1.0, 1.0, 1.0)) -> ViewPair:
    pixels = torch.from_numpy(np.ascontiguousarray(clip.pixels, dtype=np.float32))
    starts = sample_starts(pixels.shape[1], T, rng)
    views = []
    for start in starts:
        window = pixels[:, start:start + T + 1]
        params = sample_augmentation(rng, window.shape[-2], window.shape[-1], aug)
        t_static = int(rng.integers(0, T))
        views.append(decouple_window(window, params, t_static, mean, std))
    return ViewPair(views[0], views[1], clip.video_id, starts)


def eval_windows(n_frames: int, T: int, num_clips: int) -> list[int]:
    """Uniformly spaced start indices of ``num_clips`` T-frame windows."""
    last = n_frames - T
    if last < 0:
        return []
    if num_clips > last + 1:
        log.info("video has %d frames; using %d eval clips instead of %d", n_frames, last + 1, num_clips)
        num_clips = last + 1
    if num_clips == 1:
        return [last // 2]
    return [int(round(i * last / (num_clips - 1))) for i in range(num_clips)]


def prepare_eval_clip(window: torch.Tensor, crop_size: int, mean, std) -> torch.Tensor:
    """Full-frame resize to ``crop_size`` and normalization, no randomness."""
    H, W = window.shape[-2:]
    p = AugParams(0, 0, H, W, out_size=crop_size)
    m, sd = _norm_tensors(mean, std)
    return (apply_geometric(window, p) - m) / sd
