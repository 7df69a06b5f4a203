"""Training loop, freeze strategies, checkpoints and evaluation."""
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from . import backend
from .data import DatasetManifest, ManifestDataset, PreprocessConfig, SplitPlan, make_split
from .encoders import FORMAT_VERSION, read_container
from .errors import CheckpointError, ConfigurationError, PreprocessingMismatchError, TrainingError
from .head import mse_loss
from .metrics import MetricsReport, compute_report, srcc
from .model import CoDIIQA, ModelConfig

logger = logging.getLogger(__name__)

STRATEGIES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameter families are updated.

    A: both encoders frozen.  B: CAE trains with frozen normalization, DAE
    frozen.  C: mirror of B (CAE frozen, DAE trains with frozen
    normalization).  D: everything trains.
    """

    strategy: str = "B"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    @property
    def cae_trainable(self):
        return self.strategy in ("B", "D")

    @property
    def dae_trainable(self):
        return self.strategy in ("C", "D")

    @property
    def cae_norm_frozen(self):
        return self.strategy != "D"

    @property
    def dae_norm_frozen(self):
        return self.strategy != "D"


def build_trainable_params(model: CoDIIQA, policy: FreezePolicy):
    """Disjoint (trainable, frozen) lists of named parameters."""
    g = model.parameter_groups()
    trainable = g["ppim"] + g["head"]
    frozen = []
    for enc in ("cae", "dae"):
        on = getattr(policy, f"{enc}_trainable")
        norm_frozen = getattr(policy, f"{enc}_norm_frozen")
        (trainable if on else frozen).extend(g[enc])
        (trainable if on and not norm_frozen else frozen).extend(g[enc + "_norm"])
    return trainable, frozen


def apply_freeze(model: CoDIIQA, policy: FreezePolicy):
    """Set requires_grad and pin frozen encoders / norm layers to eval mode."""
    trainable, frozen = build_trainable_params(model, policy)
    for _, p in trainable:
        p.requires_grad_(True)
    for _, p in frozen:
        p.requires_grad_(False)
    pinned = []
    for enc, name in ((model.cae, "cae"), (model.dae, "dae")):
        if not getattr(policy, f"{name}_trainable"):
            pinned.append(enc)
        elif getattr(policy, f"{name}_norm_frozen"):
            pinned.extend(enc.norm_modules())
    model.pin_eval(pinned)
    return trainable, frozen


def cosine_lr(epoch, lr0, t_max=50, eta_min=0.0):
    """Closed-form cosine annealing (periodic past ``t_max``)."""
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * epoch / t_max))


LR_BY_FAMILY = {"synthetic": 1e-4, "authentic": 3e-5}


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: Optional[float] = None  # None: chosen by dataset family
    weight_decay: float = 1e-5
    t_max: int = 50
    eta_min: float = 0.0
    early_stopping: bool = True
    val_fraction: float = 0.1
    patience: int = 20
    seed: int = 0
    grad_clip: Optional[float] = None
    max_steps: Optional[int] = None
    strategy: str = "B"
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if isinstance(self.preprocess, dict):
            self.preprocess = PreprocessConfig(**self.preprocess)
        for name in ("epochs", "batch_size", "t_max"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr is not None and self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in [0, 1)")
        FreezePolicy(self.strategy)

    def learning_rate(self, family):
        return self.lr if self.lr is not None else LR_BY_FAMILY[family]

    def to_dict(self):
        d = asdict(self)
        d["preprocess"] = self.preprocess.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: CoDIIQA
    log: List[Dict]
    checkpoint: Optional[Path]
    best_epoch: Optional[int]
    steps: int
    val_manifest: Optional[DatasetManifest] = None


def _batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch, 17]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample would give batch norm a single value per channel
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def predict(model: CoDIIQA, manifest: DatasetManifest, preprocess: PreprocessConfig, batch_size=8):
    """Eval-mode predictions, one per record, in manifest order."""
    ds = ManifestDataset(manifest, "eval", replace(preprocess, resize=manifest.resize))
    was_training = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(ds), batch_size):
            x = torch.stack([ds[j][0] for j in range(i, min(i + batch_size, len(ds)))])
            preds.append(model(x).double().numpy())
    model.train(was_training)
    return np.concatenate(preds) if preds else np.zeros(0)


def _dump_state(model, out_dir, step):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_step{step}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"step": step, "state_dict": model.state_dict()}, path)
    return path


def train(model: CoDIIQA, manifest: DatasetManifest, config: TrainConfig, out_dir=None,
          log_fn=None, meta=None) -> TrainResult:
    """Minibatch MSE training with AdamW, cosine schedule and early stopping.

    With early stopping on, a content-disjoint ``val_fraction`` of the
    manifest is held out from gradient updates and monitored by SRCC.
    """
    if len(manifest) == 0:
        raise TrainingError("empty training manifest")
    if not manifest.normalized:
        raise TrainingError(f"{manifest.name}: labels must be normalized before training")
    policy = FreezePolicy(config.strategy)
    torch.manual_seed(config.seed)

    val = None
    train_m = manifest
    if config.early_stopping and config.val_fraction > 0:
        tr, va = make_split(manifest, SplitPlan(ratio=1 - config.val_fraction, seed=config.seed))
        if len(va) >= 2 and len(tr) > 0:
            train_m, val = tr, va
        else:
            logger.warning("validation carve-out too small (%d records); early stopping disabled", len(va))

    trainable, _ = apply_freeze(model, policy)
    params = [p for _, p in trainable]
    lr0 = config.learning_rate(manifest.family)
    opt = torch.optim.AdamW(params, lr=lr0, weight_decay=config.weight_decay)
    ds = ManifestDataset(train_m, "train", replace(config.preprocess, resize=manifest.resize), seed=config.seed)

    log = []
    best = (-math.inf, None, None)  # (val srcc, epoch, state)
    stale = 0
    step = 0
    model.train()
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, lr0, config.t_max, config.eta_min)
        for g in opt.param_groups:
            g["lr"] = lr
        ds.set_epoch(epoch)
        losses = []
        for idx in _batches(len(ds), config.batch_size, config.seed, epoch):
            items = [ds[int(i)] for i in idx]
            x = torch.stack([it[0] for it in items])
            y = torch.stack([it[1] for it in items])
            loss = mse_loss(model(x), y)
            if not torch.isfinite(loss):
                dump = _dump_state(model, out_dir, step)
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}; state dumped to {dump}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            losses.append(loss.item())
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break

        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_srcc": None}
        if val is not None:
            try:
                entry["val_srcc"] = srcc(predict(model, val, config.preprocess), val.labels())
            except ValueError:
                entry["val_srcc"] = None
            score = entry["val_srcc"] if entry["val_srcc"] is not None else -math.inf
            if score > best[0] or best[1] is None:
                best = (score, epoch, {k: v.detach().clone() for k, v in model.state_dict().items()})
                stale = 0
            else:
                stale += 1
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if val is not None and stale >= config.patience:
            logger.info("early stopping at epoch %d (best %d)", epoch, best[1])
            break
        if config.max_steps is not None and step >= config.max_steps:
            break

    if best[2] is not None:
        model.load_state_dict(best[2])

    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "train_log.jsonl").open("w") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
        info = dict(meta or {})
        if val is not None:
            info["validation"] = {"records": len(val), "fraction": config.val_fraction,
                                  "best_epoch": best[1]}
        ckpt = save_checkpoint(model, out_dir / "model.ckpt", config, extra=info)
    return TrainResult(model, log, ckpt, best[1], step, val)


def checkpoint_manifest(model: CoDIIQA, config: Optional[TrainConfig] = None, extra=None):
    man = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "model_config": model.cfg.to_dict(),
        "backbone_id": {"CAE": model.cae.backbone_id, "DAE": model.dae.backbone_id},
        "normalization": {"CAE": model.cae.normalization.to_dict(), "DAE": model.dae.normalization.to_dict()},
        "head": {"hidden": model.head.hidden, "activation": "gelu", "weight_activation": "sigmoid",
                 "pooling": model.head.pooling},
        "offset_generator": {"activation": "none", "taps": model.cfg.kernel ** 2},
        "kernel_backend": backend.active(),
    }
    if config is not None:
        man["train_config"] = config.to_dict()
        man["preprocess"] = config.preprocess.to_dict()
        man["seed"] = config.seed
        man["grad_clip"] = config.grad_clip
    if extra:
        man["extra"] = extra
    return man


def save_checkpoint(model: CoDIIQA, path, config: Optional[TrainConfig] = None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"manifest": checkpoint_manifest(model, config, extra), "state_dict": model.state_dict()}
    buf = io.BytesIO()
    torch.save(blob, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path):
    """Rebuild a model from a container; returns (model, manifest)."""
    blob = read_container(path)
    man = blob["manifest"]
    if man.get("kind") != "model":
        raise CheckpointError(f"{path} is a {man.get('kind')} checkpoint, not a model")
    try:
        model = CoDIIQA(ModelConfig.from_dict(man["model_config"]))
        model.load_state_dict(blob["state_dict"])
    except (RuntimeError, KeyError, ConfigurationError) as exc:
        raise CheckpointError(f"{path}: cannot restore model: {exc}") from exc
    model.eval()
    return model, man


def evaluate(model: Union[CoDIIQA, str, Path], manifest: DatasetManifest,
             preprocess: Optional[PreprocessConfig] = None, batch_size=8, **meta) -> MetricsReport:
    """Predict every record once (eval preprocessing) and score against labels.

    Given a checkpoint path, its recorded preprocessing is used; passing a
    ``preprocess`` whose crop or resize-only setting differs is refused.
    """
    recorded = None
    if not isinstance(model, CoDIIQA):
        meta.setdefault("checkpoint", str(model))
        model, man = load_checkpoint(model)
        if "preprocess" in man:
            recorded = PreprocessConfig.from_dict(man["preprocess"])
    if recorded is not None and preprocess is not None:
        for key in ("crop_size", "resize_only"):
            if getattr(recorded, key) != getattr(preprocess, key):
                raise PreprocessingMismatchError(
                    f"checkpoint was trained with {key}={getattr(recorded, key)!r}, "
                    f"evaluation requested {getattr(preprocess, key)!r}"
                )
    cfg = preprocess or recorded or PreprocessConfig()
    preds = predict(model, manifest, cfg, batch_size)
    report = compute_report(preds, manifest.labels(), dataset=manifest.name, **meta)
    for name, msg in report.errors.items():
        logger.warning("%s on %s: %s", name.upper(), manifest.name, msg)
    return report
