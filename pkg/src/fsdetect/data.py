"""Datasets and episodic sampling for K-way N-shot tasks.

Images are float32 tensors of shape ``(C, H, W)`` with values in ``[0, 1]``
everywhere in the package. Episodes are pure functions of
``(dataset, seed)``: the same seed always yields the same episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .archive import hash_tensors, read_archive, write_archive

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def as_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Dataset:
    """A set of classes with their images, belonging to one split."""

    classes: tuple[str, ...]
    images: Mapping[str, torch.Tensor]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if set(self.classes) != set(self.images):
            raise ValueError("classes and image map disagree")
        shapes = {tuple(t.shape[1:]) for t in self.images.values()}
        if len(shapes) > 1:
            raise ValueError(f"images have mixed shapes: {sorted(shapes)}")
        for c in self.classes:
            if len(self.images[c]) == 0:
                raise ValueError(f"class {c!r} has no samples")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images[self.classes[0]].shape[1:])

    def n_samples(self, cls: str) -> int:
        return int(self.images[cls].shape[0])

    def content_hash(self) -> str:
        return hash_tensors(dict(self.images), extra={"split": self.split, "classes": list(self.classes)})

    def save(self, path: str | Path) -> Path:
        arrays = {f"class{i:05d}": self.images[c] for i, c in enumerate(self.classes)}
        header = {"kind": "dataset", "split": self.split, "classes": list(self.classes)}
        return write_archive(path, arrays, header)

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        arrays, header = read_archive(path)
        if header.get("kind") != "dataset":
            raise ValueError(f"{path} is not a dataset archive")
        classes = tuple(header["classes"])
        images = {c: torch.from_numpy(arrays[f"class{i:05d}"]) for i, c in enumerate(classes)}
        return cls(classes=classes, images=images, split=header["split"])


@dataclass(frozen=True)
class Episode:
    """One K-way N-shot task.

    ``support`` is laid out per class as ``(K, N, C, H, W)``; ``query_labels``
    index into ``class_ids``.
    """

    class_ids: tuple[str, ...]
    support: torch.Tensor
    query: torch.Tensor
    query_labels: torch.Tensor
    support_idx: np.ndarray = field(repr=False)
    query_idx: np.ndarray = field(repr=False)

    @property
    def ways(self) -> int:
        return self.support.shape[0]

    @property
    def shots(self) -> int:
        return self.support.shape[1]

    def label_of(self, cls: str) -> int:
        return self.class_ids.index(cls)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 40
    samples_per_class: int = 40
    image_shape: tuple[int, int, int] = (3, 16, 16)
    class_signal_strength: float = 1.0
    noise_std: float = 0.1
    seed: int = 0
    template_grid: int = 8


def generate_synthetic(spec: SyntheticSpec, split: str = "train", class_prefix: str = "class") -> Dataset:
    """Draw a toy dataset of low-frequency class templates plus pixel noise.

    Each class gets a random coarse ``template_grid``-square pattern, upsampled
    bilinearly to the image size. A sample is
    ``0.5 + signal * (template - 0.5) + noise_std * N(0, 1)``, clipped to
    ``[0, 1]``.
    """
    if spec.n_classes <= 0 or spec.samples_per_class <= 0:
        raise ValueError("synthetic dataset needs at least one class and one sample per class")
    if spec.class_signal_strength < 0 or spec.noise_std < 0:
        raise ValueError("signal strength and noise std must be non-negative")
    c, h, w = spec.image_shape
    g = spec.template_grid
    gen = torch.Generator().manual_seed(int(spec.seed))
    coarse = torch.rand(spec.n_classes, c, g, g, generator=gen)
    templates = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=True)
    noise = torch.randn(spec.n_classes, spec.samples_per_class, c, h, w, generator=gen)
    imgs = 0.5 + spec.class_signal_strength * (templates[:, None] - 0.5) + spec.noise_std * noise
    imgs = imgs.clamp(0.0, 1.0).float()
    width = max(3, len(str(spec.n_classes - 1)))
    classes = tuple(f"{class_prefix}_{i:0{width}d}" for i in range(spec.n_classes))
    return Dataset(classes=classes, images={k: imgs[i].contiguous() for i, k in enumerate(classes)}, split=split)


def split_dataset(ds: Dataset, counts: Mapping[str, int]) -> dict[str, Dataset]:
    """Partition ``ds`` into disjoint class splits, in class order."""
    if sum(counts.values()) > len(ds.classes):
        raise ValueError(f"split counts {dict(counts)} exceed {len(ds.classes)} classes")
    out, start = {}, 0
    for split in SPLITS:
        n = counts.get(split, 0)
        if n == 0:
            continue
        names = ds.classes[start:start + n]
        out[split] = Dataset(classes=names, images={c: ds.images[c] for c in names}, split=split)
        start += n
    return out


def load_split_spec(path: str | Path) -> dict[str, list[str]]:
    spec = json.loads(Path(path).read_text())
    unknown = set(spec) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown split names in {path}: {sorted(unknown)}")
    return {k: list(v) for k, v in spec.items()}


def _load_image(path: Path, channels: int, size: tuple[int, int] | None) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def load_image_folder(
    root: str | Path,
    split_spec: Mapping[str, Sequence[str]] | str | Path,
    min_samples: int = 1,
    channels: int = 3,
    size: tuple[int, int] | None = None,
) -> dict[str, Dataset]:
    """Read ``root/<class>/<image>`` into one :class:`Dataset` per split.

    ``split_spec`` maps split name to class folder names (or is a path to a
    JSON file with that mapping). Pixel values are scaled to ``[0, 1]``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder root does not exist: {root}")
    if not isinstance(split_spec, Mapping):
        split_spec = load_split_spec(split_spec)

    seen: dict[str, str] = {}
    for split, names in split_spec.items():
        for name in names:
            if name in seen:
                raise ValueError(f"class {name!r} appears in both {seen[name]!r} and {split!r}")
            seen[name] = split

    out = {}
    for split, names in split_spec.items():
        images = {}
        for name in names:
            cdir = root / name
            if not cdir.is_dir():
                raise FileNotFoundError(f"class directory missing: {cdir}")
            files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if len(files) < max(min_samples, 1):
                raise ValueError(f"class {name!r} has {len(files)} images, needs at least {max(min_samples, 1)}")
            images[name] = torch.stack([_load_image(p, channels, size) for p in files])
        out[split] = Dataset(classes=tuple(names), images=images, split=split)
    return out


def _queries_per_class(k: int, n_query: int) -> int:
    if n_query % k:
        raise ValueError(f"query count {n_query} is not divisible by {k} ways")
    return n_query // k


def _draw(ds: Dataset, cls: str, n: int, rng: np.random.Generator, exclude: Sequence[int] = ()) -> np.ndarray:
    pool = np.setdiff1d(np.arange(ds.n_samples(cls)), np.asarray(exclude, dtype=int))
    if len(pool) < n:
        raise ValueError(f"class {cls!r} has {len(pool)} available samples, episode needs {n}")
    return rng.choice(pool, size=n, replace=False)


def _assemble(ds, classes, support_idx, query_idx, support_override=None) -> Episode:
    support = torch.stack([ds.images[c][idx] for c, idx in zip(classes, support_idx)])
    if support_override is not None:
        slot, images = support_override
        support[slot] = images
    query = torch.cat([ds.images[c][idx] for c, idx in zip(classes, query_idx)])
    labels = torch.cat([torch.full((len(idx),), i, dtype=torch.long) for i, idx in enumerate(query_idx)])
    return Episode(
        class_ids=tuple(classes),
        support=support,
        query=query,
        query_labels=labels,
        support_idx=np.stack(support_idx),
        query_idx=np.stack(query_idx),
    )


def sample_episode(ds: Dataset, ways: int, shots: int, n_query: int, seed=None) -> Episode:
    """Draw ``ways`` classes uniformly and ``shots`` + ``n_query / ways`` disjoint samples from each."""
    if ways > len(ds.classes):
        raise ValueError(f"{ways}-way episode requested but dataset has {len(ds.classes)} classes")
    rng = as_rng(seed)
    per_class = _queries_per_class(ways, n_query)
    classes = [ds.classes[i] for i in rng.choice(len(ds.classes), size=ways, replace=False)]
    support_idx, query_idx = [], []
    for c in classes:
        idx = _draw(ds, c, shots + per_class, rng)
        support_idx.append(idx[:shots])
        query_idx.append(idx[shots:])
    return _assemble(ds, classes, support_idx, query_idx)


def sample_episode_with_fixed_target(
    ds: Dataset,
    ways: int,
    shots: int,
    n_query: int,
    target_class: str,
    target_support: torch.Tensor | None = None,
    seed=None,
    exclude: Sequence[int] = (),
) -> Episode:
    """Episode that always contains ``target_class``.

    The other ``ways - 1`` classes, their supports and all queries are drawn
    fresh. The target's support is ``target_support`` when given (shape
    ``(shots, C, H, W)``), otherwise drawn. ``exclude`` lists target-class
    sample indices that must not be used as queries (e.g. the images the fixed
    support was built from).
    """
    if target_class not in ds.classes:
        raise ValueError(f"target class {target_class!r} not in dataset")
    if ways > len(ds.classes):
        raise ValueError(f"{ways}-way episode requested but dataset has {len(ds.classes)} classes")
    if target_support is not None and tuple(target_support.shape) != (shots, *ds.image_shape):
        raise ValueError(
            f"fixed target support has shape {tuple(target_support.shape)}, expected {(shots, *ds.image_shape)}"
        )
    rng = as_rng(seed)
    per_class = _queries_per_class(ways, n_query)
    others = [c for c in ds.classes if c != target_class]
    chosen = [others[i] for i in rng.choice(len(others), size=ways - 1, replace=False)]
    slot = int(rng.integers(ways))
    classes = chosen[:slot] + [target_class] + chosen[slot:]

    support_idx, query_idx = [], []
    for c in classes:
        if c == target_class and target_support is not None:
            q = _draw(ds, c, per_class, rng, exclude=exclude)
            support_idx.append(np.full(shots, -1))
            query_idx.append(q)
        else:
            idx = _draw(ds, c, shots + per_class, rng, exclude=exclude if c == target_class else ())
            support_idx.append(idx[:shots])
            query_idx.append(idx[shots:])
    if target_support is None:
        return _assemble(ds, classes, support_idx, query_idx)
    # the -1 placeholder indexes a real image; the slot is overwritten below
    return _assemble(ds, classes, support_idx, query_idx, support_override=(slot, target_support))
