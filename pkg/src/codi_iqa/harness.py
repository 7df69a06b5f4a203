"""Experiment orchestration: repeated train/evaluate runs written as report bundles."""
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image

from . import backend
from .data import (
    DatasetDescriptor, DatasetManifest, PreprocessConfig, SplitPlan, efficiency_subsets,
    leave_one_out_plans, load_descriptor, load_manifest, make_split, normalize_labels, preprocess_sample,
)
from .encoders import PRETRAINED_CONTENT, PRETRAINED_DISTORTION, load_backbone_weights
from .errors import CodiIQAError, ConfigurationError, ProvenanceError
from .metrics import MetricsReport, aggregate_runs
from .model import CoDIIQA, ModelConfig
from .trainer import FreezePolicy, TrainConfig, evaluate, load_checkpoint, train

logger = logging.getLogger(__name__)

KINDS = ("single", "cross-dataset", "efficiency", "loo-distortion", "ablation")
VARIANTS = ("full", "coarse-only", "fine-only", "content-offsets", "no-split", "shared-ppim")
EFFICIENCY_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


@dataclass
class DatasetRef:
    manifest: str
    descriptor: Optional[object] = None  # path or inline mapping

    def load(self) -> DatasetManifest:
        desc = self.descriptor
        if isinstance(desc, dict):
            desc = DatasetDescriptor.from_dict(dict(desc))
        elif desc is not None:
            desc = load_descriptor(desc)
        return normalize_labels(load_manifest(self.manifest, desc))

    def tag(self):
        """Provenance tag: dataset file name plus a digest of its content."""
        digest = hashlib.sha256(Path(self.manifest).read_bytes()).hexdigest()[:16]
        return f"{Path(self.manifest).name}#{digest}"


@dataclass
class AblationSwitches:
    coarse: bool = True
    fine: bool = True
    offsets_from: str = "distortion"
    split: bool = True
    stages: Optional[List[int]] = None
    shared_ppim: bool = False
    dim: Optional[int] = None
    squeeze: Optional[int] = None

    def __post_init__(self):
        if not (self.coarse or self.fine):
            raise ConfigurationError("ablation disables both the coarse and the fine path")
        if not self.fine and (self.offsets_from != "distortion" or not self.split):
            raise ConfigurationError("offset source and channel split only apply when the fine path is on")
        if self.offsets_from not in ("distortion", "content"):
            raise ConfigurationError(f"offsets_from must be distortion or content, got {self.offsets_from!r}")

    @classmethod
    def variant(cls, name, base: "AblationSwitches"):
        if name not in VARIANTS:
            raise ConfigurationError(f"unknown ablation variant {name!r}; expected one of {VARIANTS}")
        changes = {
            "full": {},
            "coarse-only": {"fine": False, "offsets_from": "distortion", "split": True},
            "fine-only": {"coarse": False},
            "content-offsets": {"offsets_from": "content"},
            "no-split": {"split": False},
            "shared-ppim": {"shared_ppim": True},
        }[name]
        return replace(base, **changes)

    def apply(self, cfg: ModelConfig) -> ModelConfig:
        out = replace(cfg, coarse=self.coarse, fine=self.fine, offsets_from=self.offsets_from, split=self.split,
                      shared_ppim=self.shared_ppim)
        if self.stages is not None:
            out.stages = tuple(sorted(self.stages))
        if self.dim is not None:
            out.dim = self.dim
        if self.squeeze is not None:
            out.squeeze = self.squeeze
        out.resolved_stages()
        return out


@dataclass
class ExperimentConfig:
    kind: str = "single"
    train_data: Optional[DatasetRef] = None
    test_data: List[DatasetRef] = field(default_factory=list)
    split: SplitPlan = field(default_factory=SplitPlan)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    variants: List[str] = field(default_factory=lambda: ["full", "coarse-only"])
    fractions: List[float] = field(default_factory=lambda: list(EFFICIENCY_FRACTIONS))
    weights: Dict[str, str] = field(default_factory=lambda: {"content": "random:seed=0",
                                                              "distortion": "random:seed=1"})
    repeats: int = 10
    seed: int = 0
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"experiment kind must be one of {KINDS}, got {self.kind!r}")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be at least 1")
        if self.train_data is None:
            raise ConfigurationError("a training dataset is required")
        if self.kind == "cross-dataset" and not self.test_data:
            raise ConfigurationError("cross-dataset experiments need at least one test dataset")
        if self.kind == "ablation":
            for v in self.variants:
                AblationSwitches.variant(v, self.ablation)
        if not all(0 < f < 1 for f in self.fractions):
            raise ConfigurationError("fractions must lie in (0, 1)")
        self.model = self.ablation.apply(self.model)

    @property
    def policy(self):
        return FreezePolicy(self.train.strategy)

    def to_dict(self):
        def ref(r):
            return {"manifest": r.manifest, "descriptor": r.descriptor}

        return {
            "kind": self.kind,
            "data": {"train": ref(self.train_data), "test": [ref(r) for r in self.test_data]},
            "split": {"mode": self.split.mode, "ratio": self.split.ratio, "seed": self.split.seed},
            "train": self.train.to_dict(),
            "model": self.model.to_dict(),
            "ablation": dict(vars(self.ablation)),
            "variants": list(self.variants),
            "fractions": list(self.fractions),
            "weights": dict(self.weights),
            "repeats": self.repeats,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        base = Path(base_dir) if base_dir is not None else None

        def resolve(p):
            if p is None or isinstance(p, dict) or base is None or Path(p).is_absolute():
                return p
            return str(base / p)

        def ref(x):
            if isinstance(x, str):
                x = {"manifest": x}
            return DatasetRef(resolve(x["manifest"]), resolve(x.get("descriptor")))

        try:
            data = d.pop("data", {}) or {}
            test = data.get("test") or []
            model = d.pop("model", {}) or {}
            if model.get("tiny"):
                model.pop("tiny")
                mcfg = ModelConfig.tiny(**model)
            else:
                mcfg = ModelConfig.from_dict(model)
            split = d.pop("split", {}) or {}
            weights = d.pop("weights", None)
            if weights is not None:
                weights = {k: (v if str(v).startswith("random:") else resolve(v)) for k, v in weights.items()}
            kwargs = dict(
                train_data=ref(data["train"]) if data.get("train") else None,
                test_data=[ref(t) for t in (test if isinstance(test, list) else [test])],
                split=SplitPlan(**split),
                train=TrainConfig.from_dict(d.pop("train", {}) or {}),
                model=mcfg,
                ablation=AblationSwitches(**(d.pop("ablation", {}) or {})),
            )
            if weights is not None:
                kwargs["weights"] = weights
            if "out_dir" in d:
                d["out_dir"] = resolve(d["out_dir"])
            return cls(**kwargs, **d)
        except (TypeError, KeyError) as exc:
            raise ConfigurationError(f"invalid experiment config: {exc}") from exc


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        d = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    return ExperimentConfig.from_dict(d, base_dir=path.parent)


def environment_fingerprint():
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "machine": platform.machine(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "device": "cpu",
        "default_dtype": str(torch.get_default_dtype()),
        "threads": torch.get_num_threads(),
        "matmul_precision": torch.get_float32_matmul_precision(),
        "deterministic_algorithms": torch.are_deterministic_algorithms_enabled(),
        "kernel_backend": backend.active(),
    }


def _build_model(cfg: ExperimentConfig, model_cfg: ModelConfig, seed):
    content = load_backbone_weights(cfg.weights["content"], PRETRAINED_CONTENT, model_cfg.content_backbone)
    distortion = load_backbone_weights(cfg.weights["distortion"], PRETRAINED_DISTORTION,
                                       model_cfg.distortion_backbone)
    torch.manual_seed(seed)
    model = CoDIIQA(replace(model_cfg))
    return model.load_encoder_params(content, distortion)


@dataclass
class RunSpec:
    run_id: str
    group: str
    seed: int
    train: DatasetManifest
    tests: List[DatasetManifest]
    train_tags: List[str]
    test_tags: List[str]
    model_cfg: ModelConfig


class Bundle:
    """On-disk report bundle; the index is rewritten after every run."""

    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        for sub in ("runs", "checkpoints"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        (self.root / "config.snapshot").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
        (self.root / "environment.json").write_text(json.dumps(environment_fingerprint(), indent=2, sort_keys=True))
        self.reports: Dict[str, List[MetricsReport]] = {}
        self.runs = []
        self.status = "running"
        self.error = None
        self._write_index()

    def add(self, spec: RunSpec, reports: List[MetricsReport], provenance):
        run_dir = self.root / "runs" / spec.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            self.reports.setdefault(rep.meta["group"], []).append(rep)
        payload = reports[0].to_dict() if len(reports) == 1 else {r.meta["group"]: r.to_dict() for r in reports}
        (run_dir / "report").write_text(json.dumps(payload, indent=2, sort_keys=True))
        (run_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
        self.runs.append({"run_id": spec.run_id, "seed": spec.seed, "groups": [r.meta["group"] for r in reports]})
        self._write_index()

    def finish(self):
        median = {g: aggregate_runs(reps).to_dict() for g, reps in self.reports.items()}
        (self.root / "median.report").write_text(json.dumps(median, indent=2, sort_keys=True))
        self.status = "complete"
        self._write_index()
        return median

    def fail(self, exc):
        self.status = "failed"
        self.error = exc.to_dict() if isinstance(exc, CodiIQAError) else {
            "error": "internal", "type": type(exc).__name__, "message": str(exc)}
        if self.reports:
            partial = {g: aggregate_runs(reps).to_dict() for g, reps in self.reports.items()}
            (self.root / "partial_median.report").write_text(json.dumps(partial, indent=2, sort_keys=True))
        self._write_index()

    def _write_index(self):
        index = {"status": self.status, "runs": self.runs, "error": self.error}
        (self.root / "bundle.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def _plan_runs(cfg: ExperimentConfig, model_cfg: ModelConfig) -> List[RunSpec]:
    src = cfg.train_data.load()
    src_tag = cfg.train_data.tag()
    specs = []
    plan = cfg.split
    for k in range(cfg.repeats):
        seed = cfg.seed + k
        if cfg.kind in ("single", "ablation"):
            tr, te = make_split(src, replace(plan, seed=plan.seed + k))
            specs.append(RunSpec(f"r{k:02d}", src.name, seed, tr, [te], [src_tag], [src_tag], model_cfg))
        elif cfg.kind == "cross-dataset":
            tests = [r.load() for r in cfg.test_data]
            specs.append(RunSpec(f"r{k:02d}", "", seed, src, tests, [src_tag], [r.tag() for r in cfg.test_data],
                                 model_cfg))
        elif cfg.kind == "efficiency":
            test, subsets = efficiency_subsets(src, cfg.fractions, seed=plan.seed, subset_seed=plan.seed + k,
                                               test_fraction=round(1 - plan.ratio, 10))
            for f, sub in zip(cfg.fractions, subsets):
                specs.append(RunSpec(f"frac{f:g}-r{k:02d}", f"frac{f:g}", seed, sub, [test], [src_tag], [src_tag],
                                     model_cfg))
        elif cfg.kind == "loo-distortion":
            for lp in leave_one_out_plans(src, seed=plan.seed + k):
                tr, te = make_split(src, lp)
                specs.append(RunSpec(f"{lp.held_out_distortion}-r{k:02d}", lp.held_out_distortion, seed, tr, [te],
                                     [src_tag], [src_tag], model_cfg))
    return specs


def _check_provenance(cfg: ExperimentConfig, spec: RunSpec):
    if cfg.kind != "cross-dataset":
        return
    leaked = set(spec.train_tags) & set(spec.test_tags)
    if leaked:
        raise ProvenanceError(f"cross-dataset run would train on target labels: {sorted(leaked)}")
    train_refs = {r.image_ref for r in spec.train.records}
    for t in spec.tests:
        if train_refs & {r.image_ref for r in t.records} and spec.train.root == t.root:
            raise ProvenanceError(f"target {t.name} shares image files with the training manifest")


def _execute(cfg: ExperimentConfig, specs: List[RunSpec], bundle: Bundle):
    try:
        for spec in specs:
            _check_provenance(cfg, spec)
            model = _build_model(cfg, spec.model_cfg, spec.seed)
            tcfg = replace(cfg.train, seed=spec.seed)
            run_dir = bundle.root / "runs" / spec.run_id
            logger.info("run %s: %d training records", spec.run_id, len(spec.train))
            result = train(model, spec.train, tcfg, out_dir=run_dir,
                           log_fn=lambda e, rid=spec.run_id: logger.info("%s %s", rid, json.dumps(e)),
                           meta={"run_id": spec.run_id, "train_sources": spec.train_tags})
            ckpt = bundle.root / "checkpoints" / f"{spec.run_id}.ckpt"
            result.checkpoint.replace(ckpt)
            reports = []
            for test in spec.tests:
                group = spec.group or test.name
                reports.append(evaluate(model, test, tcfg.preprocess, run_id=spec.run_id, group=group,
                                        seed=spec.seed))
            provenance = {
                "train_label_sources": spec.train_tags,
                "eval_label_sources": spec.test_tags,
                "train_records": len(spec.train),
                "validation_records": len(result.val_manifest) if result.val_manifest is not None else 0,
                "test_records": {t.name: len(t) for t in spec.tests},
                "checkpoint": str(ckpt.relative_to(bundle.root)),
            }
            bundle.add(spec, reports, provenance)
    except Exception as exc:
        bundle.fail(exc)
        raise
    return bundle.finish()


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Run every repeat, write the bundle and return its directory.

    Ablation experiments write one sub-bundle per variant under
    ``variants/<name>``, all using the same seeds.
    """
    root = Path(out_dir or cfg.out_dir)
    if cfg.kind == "ablation":
        Bundle(root, cfg)  # top-level snapshot and fingerprint
        summary = {}
        for name in cfg.variants:
            sw = AblationSwitches.variant(name, cfg.ablation)
            vcfg = replace(cfg, kind="single", ablation=sw, model=sw.apply(cfg.model))
            vroot = root / "variants" / name
            _execute(vcfg, _plan_runs(vcfg, vcfg.model), Bundle(vroot, vcfg))
            summary[name] = json.loads((vroot / "median.report").read_text())
        (root / "median.report").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (root / "bundle.json").write_text(json.dumps({"status": "complete", "variants": cfg.variants}, indent=2))
        return root
    bundle = Bundle(root, cfg)
    _execute(cfg, _plan_runs(cfg, cfg.model), bundle)
    return root


def _parse_selector(selector, stages):
    if selector == "fused":
        return "fused", None
    kind, _, idx = selector.partition(":")
    if kind not in ("content", "distortion", "interaction") or not idx.isdigit():
        raise ConfigurationError(
            f"invalid stage selector {selector!r}; use fused, content:<i>, distortion:<i> or interaction:<i>")
    i = int(idx)
    if i not in stages:
        raise ConfigurationError(f"stage {i} not in the model's stages {list(stages)}")
    return kind, list(stages).index(i)


def activation_map(feature: torch.Tensor, size) -> np.ndarray:
    """Channel-mean |activation|, min-max scaled (constant maps become 0), resized to ``size``."""
    a = feature.detach().double().abs().mean(dim=0)
    lo, hi = a.min(), a.max()
    a = (a - lo) / (hi - lo) if hi > lo else torch.zeros_like(a)
    a = F.interpolate(a[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]
    return a.clamp(0, 1).numpy()


def export_attention(checkpoint, image, selector="fused", out="attention.png", overlay=None, alpha=0.5):
    """Write an 8-bit grayscale heatmap of one feature map (and optionally an RGB overlay)."""
    model, man = load_checkpoint(checkpoint)
    kind, pos = _parse_selector(selector, model.stage_indices)
    pre = PreprocessConfig.from_dict(man["preprocess"]) if "preprocess" in man else PreprocessConfig()
    x = preprocess_sample(image, "eval", pre)
    with torch.no_grad():
        feats = model.forward_features(x[None])
    if kind == "fused":
        f = feats["fused"][0]
    elif kind == "interaction":
        f = feats["interactions"][pos][0]
    else:
        f = feats[kind].features[pos][0]
    heat = activation_map(f, tuple(x.shape[-2:]))
    gray = np.round(heat * 255.0).astype(np.uint8)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(gray, "L").save(out)
    written = [out]
    if overlay is not None:
        rgb = x.permute(1, 2, 0).numpy().astype(np.float64)
        tint = np.stack([heat, np.zeros_like(heat), 1.0 - heat], axis=-1)
        blend = np.round(((1 - alpha) * rgb + alpha * tint) * 255.0).clip(0, 255).astype(np.uint8)
        overlay = Path(overlay)
        Image.fromarray(blend, "RGB").save(overlay)
        written.append(overlay)
    return written, heat
