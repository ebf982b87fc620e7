"""
Frame rendering and deterministic toy-physics video datasets.

Bodies are drawn as isotropic Gaussian blobs. Datasets are a directory of HGF1 frame
tensors plus manifest.json, which is written last and marks the dataset complete.
"""

import os
import json
import struct
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib import colors as mcolors
from PIL import Image
from tqdm import tqdm

from analytic_systems import (InitSampler, SystemSpec, body_positions, make_system,
                              sample_initial, sample_parameters)
from errors import ConfigError, CorruptDataset, DatasetIoError, NumericalError, ShapeError
from integrators import DEFAULT_DT, integrate_arrays
from phase_core import PhaseState
from settings import worker_count

logger = logging.getLogger(__name__)

FRAME_MAGIC = b'HGF1'
MANIFEST_NAME = 'manifest.json'
MANIFEST_SCHEMA_VERSION = 1
# files that may legitimately differ between two generations of the same config
VOLATILE_FILES = {'run_status.json'}

# palette for ConstantColor, one color per body
BODY_PALETTE = [(0.9, 0.2, 0.2), (0.2, 0.6, 0.9), (0.3, 0.85, 0.3)]


class ColorMode(str, Enum):
    CONSTANT_GRAY = 'constant_gray'
    CONSTANT_COLOR = 'constant_color'
    VARIED_COLOR = 'varied_color'

    @classmethod
    def parse(cls, value) -> 'ColorMode':
        if isinstance(value, cls):
            return value
        aliases = {'ccc_gray': cls.CONSTANT_GRAY, 'gray': cls.CONSTANT_GRAY,
                   'ccc': cls.CONSTANT_COLOR, 'ccv': cls.VARIED_COLOR}
        text = str(value).lower()
        if text in aliases:
            return aliases[text]
        try:
            return cls(text)
        except ValueError:
            raise ConfigError(f"Unknown color mode: {value}")


@dataclass(frozen=True)
class RenderConfig:
    width: int = 32
    height: int = 32
    channels: int = 1
    sigma: float = 1.5
    scale: float = 8.0
    center: Tuple[float, float] = (0.0, 0.0)
    color_mode: ColorMode = ColorMode.CONSTANT_GRAY
    background: Tuple[float, ...] = (0.0,)
    pivot: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        mode = ColorMode.parse(self.color_mode)
        object.__setattr__(self, 'color_mode', mode)
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"Resolution must be at least 8×8, got {self.width}×{self.height}")
        if self.sigma <= 0:
            raise ConfigError(f"Blob radius must be positive, got {self.sigma}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if mode != ColorMode.CONSTANT_GRAY and self.channels != 3:
            raise ConfigError(f"{mode.value} needs 3 channels")
        background = tuple(float(b) for b in self.background)
        if len(background) == 1:
            background = background * self.channels
        if len(background) != self.channels:
            raise ConfigError(f"Background needs {self.channels} components, got {len(background)}")
        object.__setattr__(self, 'background', background)
        object.__setattr__(self, 'center', tuple(float(c) for c in self.center))
        object.__setattr__(self, 'pivot', tuple(float(c) for c in self.pivot))

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels

    def to_dict(self) -> Dict:
        return {
            'width': self.width,
            'height': self.height,
            'channels': self.channels,
            'sigma': self.sigma,
            'scale': self.scale,
            'center': list(self.center),
            'color_mode': self.color_mode.value,
            'background': list(self.background),
            'pivot': list(self.pivot),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'RenderConfig':
        data = dict(data)
        for key in ('center', 'background', 'pivot'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def hue_to_rgb(hue: float) -> Tuple[float, float, float]:
    """Fully saturated, full-value color for a hue in [0, 1)"""
    r, g, b = mcolors.hsv_to_rgb([hue, 1.0, 1.0])
    return float(r), float(g), float(b)


def body_colors(rc: RenderConfig, bodies: int, hue: Optional[float] = None) -> np.ndarray:
    """(bodies, channels) blob colors for the render mode"""
    if rc.color_mode == ColorMode.CONSTANT_GRAY:
        return np.ones((bodies, 1))
    if rc.color_mode == ColorMode.CONSTANT_COLOR:
        return np.array([BODY_PALETTE[i % len(BODY_PALETTE)] for i in range(bodies)])
    if hue is None:
        raise ConfigError("varied_color rendering needs a per-trajectory hue")
    return np.tile(np.array(hue_to_rgb(hue)), (bodies, 1))


def render_positions(positions: np.ndarray, colors: np.ndarray, rc: RenderConfig) -> np.ndarray:
    """
    Rasterize bodies at world positions (bodies, 2).
    World center maps to pixel (H/2, W/2); y points up.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    frame = np.empty(rc.frame_shape, dtype=np.float64)
    frame[...] = np.asarray(rc.background)
    if positions.shape[0] == 0:
        return frame.astype(np.float32)

    rows = np.arange(rc.height, dtype=np.float64)[:, None]
    cols = np.arange(rc.width, dtype=np.float64)[None, :]
    for (x, y), color in zip(positions, np.asarray(colors, dtype=np.float64)):
        col = rc.width / 2 + (x - rc.center[0]) * rc.scale
        row = rc.height / 2 - (y - rc.center[1]) * rc.scale
        blob = np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2 * rc.sigma ** 2))
        frame += blob[:, :, None] * color[None, None, :]
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def render_frame(spec: SystemSpec, s: PhaseState, rc: RenderConfig, hue: Optional[float] = None) -> np.ndarray:
    """H×W×C float32 frame in [0, 1]"""
    positions = body_positions(spec, s, rc.pivot)
    return render_positions(positions, body_colors(rc, positions.shape[0], hue), rc)


def write_frames(path: str, frames: np.ndarray):
    """HGF1: magic, frame count, H, W, C as <u4, then row-major <f4"""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4:
        raise ShapeError(f"Frame tensor must be [frames, H, W, C], got shape {frames.shape}")
    with open(path, 'wb') as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack('<4I', *frames.shape))
        f.write(frames.astype('<f4').tobytes())


def read_frames(path: str) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        raise CorruptDataset(f"Frame file {path} is missing", trajectory=os.path.basename(path))
    if len(data) < 20 or data[:4] != FRAME_MAGIC:
        raise CorruptDataset(f"{path} is not an HGF1 frame tensor", trajectory=os.path.basename(path))
    shape = struct.unpack('<4I', data[4:20])
    expected = int(np.prod(shape)) * 4
    if len(data) - 20 != expected:
        raise CorruptDataset(f"{path} holds {len(data) - 20} payload bytes, header implies {expected}",
                             trajectory=os.path.basename(path))
    return np.frombuffer(data[20:], dtype='<f4').reshape(shape).astype(np.float32)


def _trajectory_file(index: int) -> str:
    return f'traj_{index:05d}.hgf'


PIVOT_KEYS = ('pivot_x', 'pivot_y')


def _trajectory_hue(seed: int) -> float:
    # separate stream from the state sampler
    return float(np.random.default_rng([seed & 0xFFFFFFFF, 2]).uniform(0.0, 1.0))


def _trajectory_pivot(seed: int, rc: RenderConfig, ranges: Dict[str, Tuple[float, float]]) -> Tuple[float, float]:
    if not ranges:
        return rc.pivot
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 3])
    pivot = list(rc.pivot)
    for axis, key in enumerate(PIVOT_KEYS):
        if key in ranges:
            low, high = ranges[key]
            pivot[axis] = float(rng.uniform(low, high))
    return pivot[0], pivot[1]


@dataclass
class _TrajectoryResult:
    entry: Dict
    error: Optional[str] = None


def _generate_one(index: int, spec: SystemSpec, sampler: InitSampler, rc: RenderConfig,
                  frames: int, dt: float, out_dir: str) -> _TrajectoryResult:
    seed = sampler.seed + index
    pivot_ranges = {k: v for k, v in sampler.param_ranges.items() if k in PIVOT_KEYS}
    physics_ranges = {k: v for k, v in sampler.param_ranges.items() if k not in PIVOT_KEYS}
    traj_sampler = replace(sampler, seed=seed, param_ranges=physics_ranges)
    traj_spec = sample_parameters(spec, traj_sampler)
    traj_rc = replace(rc, pivot=_trajectory_pivot(seed, rc, pivot_ranges))
    entry = {
        'index': index,
        'seed': seed,
        'params': traj_spec.params,
        'pivot': list(traj_rc.pivot),
    }
    hue = _trajectory_hue(seed) if rc.color_mode == ColorMode.VARIED_COLOR else None
    if hue is not None:
        entry['hue'] = hue
        entry['color'] = list(hue_to_rgb(hue))

    s0 = sample_initial(traj_spec, traj_sampler)
    entry['initial_state'] = {'q': s0.q.tolist(), 'p': s0.p.tolist()}
    try:
        q, p = integrate_arrays(make_system(traj_spec), s0.q, s0.p, dt, frames - 1)
    except NumericalError as e:
        logger.warning(f"Trajectory {index} failed: {e}")
        entry['status'] = 'failed'
        entry['error'] = e.to_dict()
        return _TrajectoryResult(entry, str(e))

    video = np.stack([render_frame(traj_spec, PhaseState(qi, pi), traj_rc, hue) for qi, pi in zip(q, p)])
    path = os.path.join(out_dir, _trajectory_file(index))
    try:
        write_frames(path, video)
    except OSError as e:
        raise DatasetIoError(f"Could not write {path}: {e}", trajectory=index)
    entry['status'] = 'ok'
    entry['file'] = _trajectory_file(index)
    return _TrajectoryResult(entry)


def _clear_previous_generation(out_dir: str):
    """Remove the manifest and every trajectory file an earlier run left behind"""
    stale = [name for name in os.listdir(out_dir)
             if name in (MANIFEST_NAME, MANIFEST_NAME + '.tmp')
             or (name.startswith('traj_') and name.endswith('.hgf'))]
    for name in stale:
        os.remove(os.path.join(out_dir, name))
    if stale:
        logger.info(f"Removed {len(stale)} files from a previous generation in {out_dir}")


def generate_dataset(spec: SystemSpec, sampler: InitSampler, rc: RenderConfig, count: int, frames: int,
                     out_dir: str, dt: float = DEFAULT_DT, show_progress: bool = False) -> 'VideoDataset':
    """
    Sample, integrate and render count trajectories of `frames` frames each.

    Trajectory i uses seed sampler.seed + i. Integration failures are recorded in the
    manifest and skipped; the manifest is written last.
    """
    if count < 1:
        raise ConfigError(f"count must be ≥ 1, got {count}")
    if frames < 1:
        raise ConfigError(f"frames must be ≥ 1, got {frames}")
    try:
        os.makedirs(out_dir, exist_ok=True)
        _clear_previous_generation(out_dir)
    except OSError as e:
        raise DatasetIoError(f"Output directory {out_dir} is not writable: {e}")

    logger.info(f"Generating {count} {spec.kind.value} trajectories × {frames} frames into {out_dir}")
    workers = worker_count()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_generate_one, i, spec, sampler, rc, frames, dt, out_dir) for i in range(count)]
        results = [future.result() for future in tqdm(futures, desc='dataset', disable=not show_progress)]

    entries = [r.entry for r in results]
    failed = [r.entry['index'] for r in results if r.error is not None]
    manifest = {
        'schema_version': MANIFEST_SCHEMA_VERSION,
        'system': spec.to_dict(),
        'sampler': sampler.to_dict(),
        'render': rc.to_dict(),
        'dt': dt,
        'frames_per_trajectory': frames,
        'trajectory_count': count - len(failed),
        'requested_count': count,
        'failed': failed,
        'trajectories': entries,
    }
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    tmp_path = manifest_path + '.tmp'
    try:
        with open(tmp_path, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        os.replace(tmp_path, manifest_path)
    except OSError as e:
        raise DatasetIoError(f"Could not write manifest: {e}")

    if failed:
        logger.warning(f"{len(failed)} trajectories failed: {failed}")
    logger.info(f"Dataset complete: {manifest['trajectory_count']} trajectories")
    return load_dataset(out_dir)


class VideoDataset:
    """Frame sequences plus simulation metadata, read lazily in manifest order"""

    def __init__(self, manifest: Dict, entries: List[Dict], roots: List[str]):
        self.manifest = manifest
        self.entries = entries
        self.roots = roots
        self._cache: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frames_per_trajectory(self) -> int:
        return int(self.manifest['frames_per_trajectory'])

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        rc = self.manifest['render']
        return int(rc['height']), int(rc['width']), int(rc['channels'])

    @property
    def dt(self) -> float:
        return float(self.manifest['dt'])

    def timestamps(self) -> np.ndarray:
        return np.arange(self.frames_per_trajectory) * self.dt

    def read(self, i: int) -> np.ndarray:
        """Frames [F, H, W, C] of the i-th trajectory"""
        if i in self._cache:
            return self._cache[i]
        entry = self.entries[i]
        video = read_frames(entry['path'])
        expected = (self.frames_per_trajectory,) + self.frame_shape
        if video.shape != expected:
            raise CorruptDataset(f"Trajectory {entry['file']} has shape {video.shape}, manifest says {expected}",
                                 trajectory=entry['file'])
        return video

    def preload(self) -> 'VideoDataset':
        """Keep every trajectory in memory"""
        for i in range(len(self)):
            self._cache[i] = self.read(i)
        return self

    def __iter__(self) -> Iterator[Tuple[np.ndarray, Dict]]:
        for i in range(len(self)):
            yield self.read(i), self.entries[i]

    def batches(self, batch_size: int) -> Iterator[np.ndarray]:
        """Consecutive stacks of whole videos in manifest order"""
        for start in range(0, len(self), batch_size):
            yield np.stack([self.read(i) for i in range(start, min(start + batch_size, len(self)))])

    def random_window(self, length: int, rng: np.random.Generator) -> Tuple[np.ndarray, int, int]:
        """Uniform trajectory, then a uniform start for `length` consecutive frames"""
        if length > self.frames_per_trajectory or length < 1:
            raise ShapeError(f"Window of {length} frames does not fit {self.frames_per_trajectory}-frame videos")
        i = int(rng.integers(len(self)))
        start = int(rng.integers(self.frames_per_trajectory - length + 1))
        return self.read(i)[start:start + length], i, start


def load_dataset(root: str) -> VideoDataset:
    manifest_path = os.path.join(root, MANIFEST_NAME)
    try:
        with open(manifest_path, 'r') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CorruptDataset(f"No manifest in {root}; dataset is missing or incomplete")
    except json.JSONDecodeError as e:
        raise CorruptDataset(f"Manifest in {root} is not valid JSON: {e}")
    if manifest.get('schema_version') != MANIFEST_SCHEMA_VERSION:
        raise CorruptDataset(f"Unsupported manifest schema {manifest.get('schema_version')}")

    entries = []
    for entry in manifest['trajectories']:
        if entry.get('status') != 'ok':
            continue
        path = os.path.join(root, entry['file'])
        if not os.path.exists(path):
            raise CorruptDataset(f"Trajectory file {entry['file']} listed in manifest is missing",
                                 trajectory=entry['file'])
        entries.append(dict(entry, path=path))
    if len(entries) != manifest['trajectory_count']:
        raise CorruptDataset(f"Manifest counts {manifest['trajectory_count']} trajectories, found {len(entries)}")
    return VideoDataset(manifest, entries, [root])


def merge_datasets(datasets: Sequence[VideoDataset]) -> VideoDataset:
    """Union of datasets with identical frame shape and length (multi-system training)"""
    datasets = list(datasets)
    if not datasets:
        raise ConfigError("Nothing to merge")
    first = datasets[0]
    for other in datasets[1:]:
        if other.frame_shape != first.frame_shape or other.frames_per_trajectory != first.frames_per_trajectory:
            raise ShapeError(f"Datasets disagree: {first.frame_shape}×{first.frames_per_trajectory} vs "
                             f"{other.frame_shape}×{other.frames_per_trajectory}")
    manifest = dict(first.manifest)
    manifest['sources'] = [d.manifest['system'] for d in datasets]
    entries = [entry for d in datasets for entry in d.entries]
    manifest['trajectory_count'] = len(entries)
    roots = [root for d in datasets for root in d.roots]
    return VideoDataset(manifest, entries, roots)


def load_datasets(roots: Sequence[str]) -> VideoDataset:
    if len(roots) == 1:
        return load_dataset(roots[0])
    return merge_datasets([load_dataset(root) for root in roots])


def dataset_hash(root: str) -> str:
    """SHA-256 over relative file names and contents, in sorted order"""
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name in VOLATILE_FILES:
                continue
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).replace(os.sep, '/').encode())
            with open(path, 'rb') as f:
                digest.update(f.read())
    return digest.hexdigest()


def export_png_strip(frames: np.ndarray, path: str):
    """Frames side by side as one 8-bit PNG (lossy; for looking at, not for tests)"""
    frames = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    strip = np.concatenate(list(frames), axis=1)
    pixels = np.round(strip * 255).astype(np.uint8)
    if pixels.shape[-1] == 1:
        image = Image.fromarray(pixels[..., 0], mode='L')
    else:
        image = Image.fromarray(pixels, mode='RGB')
    image.save(path)
