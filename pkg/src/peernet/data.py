"""Synthetic multi-modal clips whose label needs both object identity and motion.

Every clip shows one square moving at constant velocity. The square's
object class ``o`` sets the hot channel of the one-hot object mask and,
coarsely, its colour in rgb: objects share colours in groups, so rgb alone
cannot tell every object apart. The motion pattern ``m`` is the direction
of travel; it appears in the flow channels and as frame-to-frame
displacement in rgb. The label is ``(o * motion_patterns + m) % num_classes``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

SPLITS = {"train": 0, "test": 1}

# Unit directions of the motion patterns, as (dy, dx).
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))

# Saturated colours assigned to colour groups.
PALETTE = np.array(
    [
        [1.0, 0.1, 0.1],
        [0.1, 1.0, 0.1],
        [0.1, 0.1, 1.0],
        [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0],
        [0.1, 1.0, 1.0],
        [1.0, 0.6, 0.2],
        [0.6, 0.6, 0.6],
    ]
)


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 16
    num_objects: int = 8
    motion_patterns: int = 4
    mask_noise_rate: float = 0.15
    samples: int = 2000
    test_samples: int = 400
    seed: int = 0
    T: int = 4
    H: int = 16
    W: int = 16
    square: int = 6
    speed: int = 2
    colours: int = 4
    pixel_noise: float = 0.1

    def __post_init__(self):
        if self.num_classes < 1 or self.num_objects < 1 or self.motion_patterns < 1:
            raise ValueError("num_classes, num_objects and motion_patterns must be positive")
        if self.num_classes > self.num_objects * self.motion_patterns:
            raise ValueError("num_classes cannot exceed num_objects * motion_patterns")
        if self.motion_patterns > len(DIRECTIONS):
            raise ValueError(f"at most {len(DIRECTIONS)} motion patterns are available")
        if not 0.0 <= self.mask_noise_rate < 1.0:
            raise ValueError("mask_noise_rate must lie in [0, 1)")
        if not 1 <= self.colours <= min(self.num_objects, len(PALETTE)):
            raise ValueError(f"colours must lie in [1, {min(self.num_objects, len(PALETTE))}]")
        travel = self.speed * (self.T - 1)
        if self.square + travel > min(self.H, self.W):
            raise ValueError("the square does not fit its path inside the frame")

    @property
    def mask_channels(self) -> int:
        """Object classes plus a trailing background channel."""
        return self.num_objects + 1

    def label(self, obj: int, motion: int) -> int:
        return (obj * self.motion_patterns + motion) % self.num_classes

    def colour(self, obj: int) -> int:
        return obj * self.colours // self.num_objects

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    rgb: np.ndarray
    flow: np.ndarray
    object_mask: np.ndarray
    label: int
    obj: int
    motion: int


def sample_rng(config: GeneratorConfig, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, SPLITS[split], index])


def generate_sample(config: GeneratorConfig, split: str, index: int) -> SyntheticSample:
    """Sample ``index`` of ``split``; a pure function of its arguments."""
    rng = sample_rng(config, split, index)
    T, H, W, S = config.T, config.H, config.W, config.square
    obj = int(rng.integers(config.num_objects))
    motion = int(rng.integers(config.motion_patterns))
    dy, dx = DIRECTIONS[motion]
    travel = config.speed * (T - 1)

    def start(d: int, size: int) -> int:
        lo = travel if d < 0 else 0
        hi = size - S - (travel if d > 0 else 0)
        return int(rng.integers(lo, hi + 1))

    y0, x0 = start(dy, H), start(dx, W)
    inside = np.zeros((T, H, W), dtype=bool)
    for t in range(T):
        y, x = y0 + dy * config.speed * t, x0 + dx * config.speed * t
        inside[t, y:y + S, x:x + S] = True

    rgb = rng.normal(0.0, config.pixel_noise, (T, H, W, 3))
    rgb[inside] += PALETTE[config.colour(obj)]

    flow = rng.normal(0.0, config.pixel_noise, (T, H, W, 2))
    flow[inside] += np.array([dx, dy], dtype=np.float64) / np.sqrt(dx * dx + dy * dy)
    np.clip(flow, -1.0, 1.0, out=flow)

    background = config.num_objects
    classes = np.where(inside, obj, background)
    flip = rng.random((T, H, W)) < config.mask_noise_rate
    # A flipped pixel takes a uniformly random wrong class.
    shift = rng.integers(1, config.mask_channels, size=(T, H, W))
    classes = np.where(flip, (classes + shift) % config.mask_channels, classes)
    mask = np.zeros((T, H, W, config.mask_channels))
    np.put_along_axis(mask, classes[..., None], 1.0, axis=-1)
    return SyntheticSample(rgb, flow, mask, config.label(obj, motion), obj, motion)


@dataclass
class Dataset:
    config: GeneratorConfig
    split: str
    rgb: np.ndarray
    flow: np.ndarray
    object_mask: np.ndarray
    labels: np.ndarray
    objects: np.ndarray
    motions: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(
            self.rgb[i], self.flow[i], self.object_mask[i], int(self.labels[i]),
            int(self.objects[i]), int(self.motions[i]),
        )

    def inputs(self, idx, objects: bool = True) -> dict[str, np.ndarray]:
        out = {"rgb": self.rgb[idx], "flow": self.flow[idx]}
        if objects:
            out["object"] = self.object_mask[idx]
        return out


def generate_dataset(config: GeneratorConfig, split: str = "train", count: int | None = None) -> Dataset:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if count is None:
        count = config.samples if split == "train" else config.test_samples
    samples = [generate_sample(config, split, i) for i in range(count)]
    return Dataset(
        config,
        split,
        np.stack([s.rgb for s in samples]),
        np.stack([s.flow for s in samples]),
        np.stack([s.object_mask for s in samples]),
        np.array([s.label for s in samples], dtype=np.int64),
        np.array([s.obj for s in samples], dtype=np.int64),
        np.array([s.motion for s in samples], dtype=np.int64),
    )


def batcher(
    dataset: Dataset, batch: int, seed: int = 0, drop_last: bool = True
) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch."""
    n = len(dataset)
    if not 1 <= batch <= n:
        raise ValueError(f"batch {batch} must lie in [1, {n}]")
    rng = np.random.default_rng([seed, 0xBA7C])
    while True:
        order = rng.permutation(n)
        stop = n - n % batch if drop_last else n
        for s in range(0, stop, batch):
            yield order[s:s + batch]


def dump_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write flat little-endian float64 arrays plus a JSON manifest for one split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "rgb": dataset.rgb,
        "flow": dataset.flow,
        "object_mask": dataset.object_mask,
        "labels": dataset.labels.astype(np.float64),
    }
    entries = {}
    for name, arr in arrays.items():
        path = directory / f"{dataset.split}_{name}.bin"
        path.write_bytes(arr.astype("<f8").tobytes())
        entries[name] = {"file": path.name, "shape": list(arr.shape)}
    manifest = {
        "split": dataset.split,
        "count": len(dataset),
        "seed": dataset.config.seed,
        "config": dataset.config.to_json(),
        "arrays": entries,
    }
    out = directory / f"{dataset.split}_manifest.json"
    out.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out
