"""Synthetic multi-camera tracklets with camera-wise shift, clips and frame sampling.

Each identity owns a latent centre. A frame is

    centre + camera_offset[cam] + drift along the tracklet + noise

with camera offsets drawn as random directions of a fixed magnitude, so
that, untreated, camera identity dominates the geometry of the features.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

SOURCE, TARGET = "source", "target"


class BadConfig(ValueError):
    pass


class TooFewFrames(ValueError):
    pass


class ClipTooShort(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    source_ids: int = 32
    source_cams: int = 2
    target_ids: int = 24
    target_cams: int = 3
    tracklets_per_id_cam: int = 2
    frames: int = 16
    d_in: int = 16
    id_spread: float = 1.0
    camera_shift: float = 3.0
    camera_scale: float = 0.0
    domain_shift: float = 0.0
    drift: float = 0.5
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        counts = (self.source_ids, self.source_cams, self.target_ids, self.target_cams,
                  self.tracklets_per_id_cam, self.frames, self.d_in)
        if min(counts) < 1:
            raise BadConfig("all counts must be >= 1")
        spreads = (self.id_spread, self.camera_shift, self.camera_scale,
                   self.domain_shift, self.drift, self.noise)
        if min(spreads) < 0:
            raise BadConfig("spreads and magnitudes must be >= 0")


PRESETS: dict[str, GenConfig] = {
    "default": GenConfig(),
    "unshifted": GenConfig(camera_shift=0.0),
    "noisy": GenConfig(noise=0.9, drift=0.9),
}


def preset(name: str, **overrides) -> GenConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise BadConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass
class Tracklet:
    tracklet_id: int
    person_id: int
    camera: int
    domain: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or len(self.frames) < 1:
            raise DataError(f"tracklet {self.tracklet_id} needs at least one frame")
        if self.domain not in (SOURCE, TARGET):
            raise DataError(f"unknown domain {self.domain!r}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class Dataset:
    tracklets: list[Tracklet]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tracklets)

    def domain(self, name: str) -> list[Tracklet]:
        return [t for t in self.tracklets if t.domain == name]

    @property
    def source(self) -> list[Tracklet]:
        return self.domain(SOURCE)

    @property
    def target(self) -> list[Tracklet]:
        return self.domain(TARGET)

    @property
    def d_in(self) -> int:
        return self.tracklets[0].frames.shape[1]

    def n_cameras(self, name: str) -> int:
        return 1 + max(t.camera for t in self.domain(name))


def _directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate(config: GenConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    d, nf = config.d_in, config.frames
    tracklets: list[Tracklet] = []
    domain_offset = {SOURCE: np.zeros(d),
                     TARGET: config.domain_shift * _directions(rng, 1, d)[0]}
    person_base = 0
    for domain, n_ids, n_cams in ((SOURCE, config.source_ids, config.source_cams),
                                  (TARGET, config.target_ids, config.target_cams)):
        centers = config.id_spread * rng.standard_normal((n_ids, d))
        offsets = config.camera_shift * _directions(rng, n_cams, d)
        scales = 1.0 + config.camera_scale * rng.standard_normal(n_cams)
        ramp = np.linspace(-1.0, 1.0, nf)[:, None]
        for pid in range(n_ids):
            for cam in range(n_cams):
                for _ in range(config.tracklets_per_id_cam):
                    direction = _directions(rng, 1, d)[0]
                    frames = (scales[cam] * centers[pid] + offsets[cam] + domain_offset[domain]
                              + config.drift * ramp * direction
                              + config.noise * rng.standard_normal((nf, d)))
                    tracklets.append(Tracklet(len(tracklets), person_base + pid, cam, domain, frames))
        person_base += n_ids
    return Dataset(tracklets, {"config": asdict(config)})


# ------------------------------------------------------------- clips/frames


@dataclass(frozen=True)
class Clip:
    parent: int
    index: int
    frame_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.frame_indices)


def _chunks(n: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous equal parts of range(n); the remainder goes to the last part."""
    size = n // parts
    bounds = [(i * size, (i + 1) * size) for i in range(parts - 1)]
    bounds.append(((parts - 1) * size, n))
    return bounds


def split_clips(t: Tracklet, n_clips: int) -> list[Clip]:
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if t.n_frames < n_clips:
        raise TooFewFrames(f"tracklet {t.tracklet_id} has {t.n_frames} frames, "
                           f"cannot make {n_clips} clips")
    return [Clip(t.tracklet_id, i, np.arange(a, b))
            for i, (a, b) in enumerate(_chunks(t.n_frames, n_clips))]


def sample_frames(c: Clip, n_chunks: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn frame index per contiguous chunk, in order."""
    if n_chunks < 1 or len(c) < n_chunks:
        raise ClipTooShort(f"clip of {len(c)} frames cannot give {n_chunks} chunks")
    picks = [rng.integers(a, b) for a, b in _chunks(len(c), n_chunks)]
    return c.frame_indices[np.asarray(picks, dtype=np.intp)]


# ---------------------------------------------------------------- file I/O


def save_dataset(ds: Dataset, path: str | Path) -> None:
    lines = []
    for t in ds.tracklets:
        lines.append(f"{t.tracklet_id} {t.person_id} {t.camera} {t.domain} "
                     f"{t.n_frames} {t.frames.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in t.frames)
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset file not found: {p}")
    lines = p.read_text().splitlines()
    tracklets, i = [], 0
    try:
        while i < len(lines):
            if not lines[i].strip():
                i += 1
                continue
            tid, pid, cam, domain, nf, d = lines[i].split()
            nf, d = int(nf), int(d)
            frames = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(nf)])
            if frames.shape != (nf, d):
                raise DataError(f"{p}: tracklet {tid} frames have shape {frames.shape}")
            tracklets.append(Tracklet(int(tid), int(pid), int(cam), domain, frames))
            i += 1 + nf
    except (ValueError, IndexError) as exc:
        raise DataError(f"{p}: malformed dataset near line {i + 1}: {exc}") from exc
    if not tracklets:
        raise DataError(f"{p}: no tracklets")
    return Dataset(tracklets)


def content_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def frame_table(tracklets: Iterable[Tracklet]) -> tuple[np.ndarray, np.ndarray]:
    """All frames stacked, with the camera of each frame."""
    ts = list(tracklets)
    x = np.concatenate([t.frames for t in ts])
    cams = np.concatenate([np.full(t.n_frames, t.camera) for t in ts])
    return x, cams
