"""Dataset manifests, label normalization, split protocols and preprocessing.

Manifest files are UTF-8 delimiter-separated text (comma or tab) with a
header row. Required columns: ``image_ref`` and ``score``; optional:
``distortion_type``, ``content_id`` and ``split`` (train/test, used by the
fixed-official protocol). Relative image paths resolve against the
manifest's directory unless the descriptor sets ``root``.

A dataset descriptor (JSON or YAML) declares::

    name: KonIQ-10K
    score_range: [1, 5]
    higher_is_better: true
    family: authentic            # or synthetic
    resize: {kind: none}         # or shorter_side / shorter_side_random / fixed
"""
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from PIL import Image

from .errors import ConfigurationError, InputError, ManifestError

logger = logging.getLogger(__name__)

SPLIT_MODES = ("random-content-disjoint", "leave-one-distortion-out", "fixed-official")


@dataclass(frozen=True)
class ResizeRule:
    kind: str = "none"
    size: Optional[int] = None
    min_size: Optional[int] = None
    max_size: Optional[int] = None
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        kinds = ("none", "shorter_side", "shorter_side_random", "fixed")
        if self.kind not in kinds:
            raise ConfigurationError(f"resize kind must be one of {kinds}, got {self.kind!r}")
        if self.kind == "shorter_side" and not self.size:
            raise ConfigurationError("shorter_side resize needs size")
        if self.kind == "shorter_side_random" and not (self.min_size and self.max_size and self.min_size <= self.max_size):
            raise ConfigurationError("shorter_side_random resize needs min_size <= max_size")
        if self.kind == "fixed" and not (self.width and self.height):
            raise ConfigurationError("fixed resize needs width and height")

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        if isinstance(d, ResizeRule):
            return d
        d = dict(d)
        if d.get("kind") == "shorter_side_random" and "range" in d:
            d["min_size"], d["max_size"] = d.pop("range")
        if d.get("kind") == "fixed" and "size" in d and "width" not in d:
            size = d.pop("size")
            d["height"], d["width"] = (size, size) if isinstance(size, int) else size
        return cls(**d)

    def to_dict(self):
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


SPAQ_RESIZE = ResizeRule("shorter_side", size=448)
FLIVE_RESIZE = ResizeRule("shorter_side_random", min_size=384, max_size=416)


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    score_range: Tuple[float, float]
    higher_is_better: bool = True
    family: str = "authentic"
    resize: ResizeRule = field(default_factory=ResizeRule)
    root: Optional[str] = None

    def __post_init__(self):
        if self.family not in ("synthetic", "authentic"):
            raise ConfigurationError(f"family must be synthetic or authentic, got {self.family!r}")
        lo, hi = self.score_range
        object.__setattr__(self, "score_range", (float(lo), float(hi)))
        if isinstance(self.resize, dict):
            object.__setattr__(self, "resize", ResizeRule.from_dict(self.resize))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["score_range"] = tuple(d["score_range"])
        d["resize"] = ResizeRule.from_dict(d.get("resize"))
        return cls(**d)

    def to_dict(self):
        return {"name": self.name, "score_range": list(self.score_range), "higher_is_better": self.higher_is_better,
                "family": self.family, "resize": self.resize.to_dict(), "root": self.root}


def load_descriptor(path) -> DatasetDescriptor:
    path = Path(path)
    try:
        d = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read descriptor {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigurationError(f"descriptor {path} must be a mapping")
    try:
        return DatasetDescriptor.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"invalid descriptor {path}: {exc}") from exc


@dataclass(frozen=True)
class SampleRecord:
    image_ref: str
    raw_score: float
    higher_is_better: bool = True
    distortion_type: Optional[str] = None
    content_id: Optional[str] = None
    split: Optional[str] = None
    label: Optional[float] = None  # normalized score in [0, 1], 1 = best


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: Tuple[SampleRecord, ...]
    score_range: Tuple[float, float]
    family: str = "authentic"
    root: Optional[str] = None
    resize: ResizeRule = field(default_factory=ResizeRule)
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        hib = {r.higher_is_better for r in self.records}
        if len(hib) > 1:
            raise ManifestError(f"{self.name}: records disagree on higher_is_better")

    def __len__(self):
        return len(self.records)

    @property
    def higher_is_better(self):
        return self.records[0].higher_is_better if self.records else True

    def with_records(self, records, suffix=None):
        name = f"{self.name}[{suffix}]" if suffix else self.name
        return replace(self, records=tuple(records), name=name)

    def labels(self):
        if not self.normalized:
            raise ManifestError(f"{self.name}: labels requested before normalize_labels")
        return np.array([r.label for r in self.records], dtype=np.float64)

    def image_path(self, record: SampleRecord) -> Path:
        p = Path(record.image_ref)
        if p.is_absolute() or self.root is None:
            return p
        return Path(self.root) / p

    def content_ids(self):
        return {content_key(r, self.family) for r in self.records}

    def distortion_types(self):
        return sorted({r.distortion_type for r in self.records if r.distortion_type is not None})


def content_key(record: SampleRecord, family="authentic"):
    if record.content_id is not None:
        return record.content_id
    if family == "synthetic":
        raise ManifestError(f"synthetic record {record.image_ref!r} has no content_id")
    return record.image_ref


def load_manifest(path, descriptor: Optional[DatasetDescriptor] = None) -> DatasetManifest:
    """Read and validate a manifest file.

    Without a descriptor the score range is taken from the data and scores
    are assumed to be higher-is-better.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty file")
    delimiter = "\t" if "\t" in lines[0] else ","
    reader = csv.DictReader(lines, delimiter=delimiter)
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = [c for c in ("image_ref", "score") if c not in header]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")

    rows = []
    problems = []
    for lineno, row in enumerate(reader, start=2):
        row = {k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in row.items() if k is not None}
        try:
            score = float(row["score"])
        except (TypeError, ValueError):
            problems.append(f"row {lineno}: score {row.get('score')!r} is not a number")
            continue
        if not math.isfinite(score):
            problems.append(f"row {lineno}: score {row['score']!r} is not finite")
            continue
        rows.append((lineno, row, score))
    if not rows and not problems:
        raise ManifestError(f"{path}: no records")

    if descriptor is None:
        scores = [s for _, _, s in rows]
        descriptor = DatasetDescriptor(path.stem, (min(scores), max(scores)) if scores else (0.0, 1.0))
        logger.warning("%s: no descriptor given; score range inferred as %s", path, descriptor.score_range)
    lo, hi = descriptor.score_range

    seen = {}
    records = []
    for lineno, row, score in rows:
        ref = row["image_ref"]
        if not ref:
            problems.append(f"row {lineno}: empty image_ref")
            continue
        if ref in seen:
            problems.append(f"row {lineno}: duplicate image_ref {ref!r} (first at row {seen[ref]})")
            continue
        seen[ref] = lineno
        if not lo <= score <= hi:
            problems.append(f"row {lineno}: score {score:g} outside declared range [{lo:g}, {hi:g}]")
            continue
        split = row.get("split") or None
        if split is not None and split not in ("train", "test"):
            problems.append(f"row {lineno}: split must be train or test, got {split!r}")
            continue
        records.append(SampleRecord(
            image_ref=ref,
            raw_score=score,
            higher_is_better=descriptor.higher_is_better,
            distortion_type=row.get("distortion_type") or None,
            content_id=row.get("content_id") or None,
            split=split,
        ))
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))

    if descriptor.family == "synthetic":
        lacking = [r.image_ref for r in records if r.content_id is None]
        if lacking:
            raise ManifestError(f"{path}: synthetic dataset records lack content_id, e.g. {lacking[:3]}")
    root = descriptor.root if descriptor.root is not None else str(path.parent)
    if descriptor.root is not None and not Path(descriptor.root).is_absolute():
        root = str(path.parent / descriptor.root)
    return DatasetManifest(descriptor.name, tuple(records), (lo, hi), descriptor.family, root, descriptor.resize)


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    cols = ["image_ref", "score", "distortion_type", "content_id", "split"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in manifest.records:
            w.writerow([r.image_ref, repr(r.raw_score), r.distortion_type or "", r.content_id or "", r.split or ""])
    return path


def normalize_labels(m: DatasetManifest) -> DatasetManifest:
    """Min-max scale raw scores to [0, 1]; lower-is-better scales are inverted."""
    lo, hi = m.score_range
    if not hi > lo:
        raise ManifestError(f"{m.name}: degenerate score range [{lo}, {hi}]")
    out = []
    for r in m.records:
        v = (r.raw_score - lo) / (hi - lo)
        out.append(replace(r, label=v if r.higher_is_better else 1.0 - v))
    return replace(m, records=tuple(out), normalized=True)


@dataclass(frozen=True)
class SplitPlan:
    mode: str = "random-content-disjoint"
    ratio: float = 0.8
    seed: int = 0
    held_out_distortion: Optional[str] = None

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ConfigurationError(f"split mode must be one of {SPLIT_MODES}, got {self.mode!r}")
        if not 0 < self.ratio <= 1:
            raise ConfigurationError(f"split ratio must lie in (0, 1], got {self.ratio}")
        if (self.mode == "leave-one-distortion-out") != (self.held_out_distortion is not None):
            raise ConfigurationError("held_out_distortion is required exactly for leave-one-distortion-out")

    def split_id(self):
        if self.mode == "leave-one-distortion-out":
            return f"loo-{self.held_out_distortion}"
        if self.mode == "fixed-official":
            return "official"
        return f"content-{self.ratio:g}-seed{self.seed}"


def make_split(m: DatasetManifest, plan: SplitPlan) -> Tuple[DatasetManifest, DatasetManifest]:
    if plan.mode == "leave-one-distortion-out":
        types = m.distortion_types()
        if plan.held_out_distortion not in types:
            raise ManifestError(f"{m.name}: unknown distortion {plan.held_out_distortion!r}; have {types}")
        if any(r.distortion_type is None for r in m.records):
            raise ManifestError(f"{m.name}: some records have no distortion_type")
        test = [r for r in m.records if r.distortion_type == plan.held_out_distortion]
        train = [r for r in m.records if r.distortion_type != plan.held_out_distortion]
    elif plan.mode == "fixed-official":
        if any(r.split is None for r in m.records):
            raise ManifestError(f"{m.name}: fixed-official split needs a split column on every record")
        train = [r for r in m.records if r.split == "train"]
        test = [r for r in m.records if r.split == "test"]
    else:
        keys = [content_key(r, m.family) for r in m.records]
        groups = sorted(set(keys))
        rng = np.random.default_rng(plan.seed)
        order = rng.permutation(len(groups))
        n_train = int(round(plan.ratio * len(groups)))
        train_groups = {groups[i] for i in order[:n_train]}
        train = [r for r, k in zip(m.records, keys) if k in train_groups]
        test = [r for r, k in zip(m.records, keys) if k not in train_groups]
    sid = plan.split_id()
    return m.with_records(train, f"train:{sid}"), m.with_records(test, f"test:{sid}")


def leave_one_out_plans(m: DatasetManifest, seed=0) -> List[SplitPlan]:
    return [SplitPlan("leave-one-distortion-out", 1.0, seed, t) for t in m.distortion_types()]


def efficiency_subsets(m: DatasetManifest, fractions: Sequence[float], seed=0, test_fraction=0.2,
                       nested=True, subset_seed=None) -> Tuple[DatasetManifest, List[DatasetManifest]]:
    """Fixed content-disjoint test split plus one training subset per fraction.

    Fractions are of the whole dataset. Nested subsets grow by extending
    one shuffled order; independent ones draw a fresh order per fraction.
    ``seed`` fixes the test split, ``subset_seed`` (default: ``seed``) the
    subset draws, so repeats can resample subsets against one test set.
    """
    for f in fractions:
        if not 0 < f < 1:
            raise ConfigurationError(f"fraction {f} outside (0, 1)")
        if f + test_fraction > 1 + 1e-9:
            raise ConfigurationError(f"fraction {f} plus test fraction {test_fraction} exceeds the dataset")
    pool, test = make_split(m, SplitPlan("random-content-disjoint", 1 - test_fraction, seed))
    sseed = seed if subset_seed is None else subset_seed
    order = np.random.default_rng([sseed, 1]).permutation(len(pool))
    subsets = []
    for i, f in enumerate(fractions):
        n = min(len(pool), int(round(f * len(m))))
        if not nested:
            order = np.random.default_rng([sseed, 2, i]).permutation(len(pool))
        idx = sorted(order[:n])
        subsets.append(pool.with_records([pool.records[j] for j in idx], f"frac{f:g}"))
    return test, subsets


@dataclass(frozen=True)
class PreprocessConfig:
    crop_size: int = 384
    resize: ResizeRule = field(default_factory=ResizeRule)
    hflip_prob: float = 0.5
    resize_only: bool = False

    def __post_init__(self):
        if isinstance(self.resize, dict):
            object.__setattr__(self, "resize", ResizeRule.from_dict(self.resize))

    def to_dict(self):
        return {"crop_size": self.crop_size, "resize": self.resize.to_dict(), "hflip_prob": self.hflip_prob,
                "resize_only": self.resize_only}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sample_rng(seed, epoch, index):
    """Augmentation stream for one sample; a pure function of its arguments."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def _as_pil(image):
    if isinstance(image, Image.Image):
        return image.convert("RGB")
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                return im.convert("RGB")
        except OSError as exc:
            raise InputError(f"cannot decode image {image}: {exc}") from exc
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected an HxWx3 array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(arr, "RGB")


def _resize_shorter(im, side):
    w, h = im.size
    if min(w, h) == side:
        return im
    scale = side / min(w, h)
    return im.resize((max(side, round(w * scale)), max(side, round(h * scale))), Image.BILINEAR)


def preprocess_sample(image, mode="eval", cfg: PreprocessConfig = PreprocessConfig(), rng=None) -> torch.Tensor:
    """Resize rule, one crop, optional flip; returns a float32 3xSxS tensor in [0, 1].

    ``mode="train"`` draws crop position, flip and any random resize from
    ``rng``; ``mode="eval"`` is deterministic (center crop, no flip).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng")
    im = _as_pil(image)
    s = cfg.crop_size
    rule = cfg.resize

    if rule.kind == "shorter_side":
        im = _resize_shorter(im, rule.size)
    elif rule.kind == "shorter_side_random":
        side = int(rng.integers(rule.min_size, rule.max_size + 1)) if mode == "train" else rule.min_size
        im = _resize_shorter(im, side)
    elif rule.kind == "fixed":
        im = im.resize((rule.width, rule.height), Image.BILINEAR)

    if cfg.resize_only:
        if im.size != (s, s):
            im = im.resize((s, s), Image.BILINEAR)
    elif min(im.size) < s:
        logger.warning("image %sx%s smaller than crop %s; upscaling", im.size[0], im.size[1], s)
        im = _resize_shorter(im, s)

    w, h = im.size
    if mode == "train":
        top = int(rng.integers(0, h - s + 1))
        left = int(rng.integers(0, w - s + 1))
        flip = rng.random() < cfg.hflip_prob
    else:
        top, left, flip = (h - s) // 2, (w - s) // 2, False
    im = im.crop((left, top, left + s, top + s))
    if flip:
        im = im.transpose(Image.FLIP_LEFT_RIGHT)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


class ManifestDataset(torch.utils.data.Dataset):
    """Preprocessed (image, label) pairs; call ``set_epoch`` before each epoch."""

    def __init__(self, manifest: DatasetManifest, mode="eval", cfg: Optional[PreprocessConfig] = None, seed=0):
        if not manifest.normalized:
            raise ManifestError(f"{manifest.name}: normalize labels before building a dataset")
        self.m = manifest
        self.mode = mode
        self.cfg = cfg or PreprocessConfig(resize=manifest.resize)
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.m)

    def __getitem__(self, i):
        r = self.m.records[i]
        rng = sample_rng(self.seed, self.epoch, i) if self.mode == "train" else None
        x = preprocess_sample(self.m.image_path(r), self.mode, self.cfg, rng)
        return x, torch.tensor(r.label, dtype=torch.float32)
