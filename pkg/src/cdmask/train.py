"""Training loop, checkpoints, evaluation, threshold sweeps and error maps."""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from .data import ChangeDetectionDataset, collate, read_image, scan_dataset, to_tensor
from .head import detect, threshold as apply_threshold
from .matching import LossWeights, SetCriterion
from .metrics import ConfusionCounts, accumulate, compute
from .model import CDMaskFormer, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cdmask-ckpt-v1"
SWEEP_THRESHOLDS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_root: str = "data"
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    deep_supervision: bool = True
    mask_loss_resolution: str = "prediction"
    lr: float = 1e-4
    backbone_lr: float = 5e-4
    weight_decay: float = 0.05
    backbone_weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    poly_power: float = 0.9
    total_steps: int = 2000
    batch_size: int = 8
    augment: bool = True
    threshold: float = 0.5
    seed: int = 0
    eval_every: int = 500
    eval_split: str = "val"
    log_every: int = 10
    checkpoint_every: int = 0  # 0: only at the end

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.backbone_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        import yaml

        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d


def poly_lr(step: int, total: int, base: float, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base * (1 - step / total) ** power


def build_optimizer(model: CDMaskFormer, cfg: TrainConfig) -> torch.optim.Adam:
    groups = [
        {
            "name": "backbone",
            "params": model.backbone_parameters(),
            "lr": cfg.backbone_lr,
            "base_lr": cfg.backbone_lr,
            "weight_decay": cfg.backbone_weight_decay,
        },
        {
            "name": "rest",
            "params": model.other_parameters(),
            "lr": cfg.lr,
            "base_lr": cfg.lr,
            "weight_decay": cfg.weight_decay,
        },
    ]
    return torch.optim.Adam(groups, betas=cfg.betas, eps=cfg.eps)


def set_lr(optimizer, step, cfg: TrainConfig):
    for group in optimizer.param_groups:
        group["lr"] = poly_lr(step, cfg.total_steps, group["base_lr"], cfg.poly_power)


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> List[int]:
    """Indices for ``step``: consecutive slices of per-epoch seeded permutations.

    Depends only on its arguments, so a resumed run sees the same batches.
    """
    out = []
    pos = step * batch_size
    cache = {}
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        if epoch not in cache:
            gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
            cache[epoch] = torch.randperm(n, generator=gen).tolist()
        out.append(cache[epoch][offset])
        pos += 1
    return out


def save_checkpoint(path, model, optimizer, step, cfg: TrainConfig, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "config": cfg.to_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, cfg: Optional[TrainConfig] = None):
    """Rebuild the model from a checkpoint; returns ``(model, config, payload)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = cfg or TrainConfig.from_dict(payload["config"])
    model = CDMaskFormer(cfg.model)
    try:
        model.load_state_dict(payload["model"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the model config: {exc}") from exc
    model.eval()
    return model, cfg, payload


class JsonlLogger:
    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, **record):
        self.records.append(record)
        line = json.dumps(record, sort_keys=True)
        log.info(line)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def _scalars(parts):
    return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}


def train(cfg: TrainConfig, resume: Optional[str] = None, train_records=None, val_records=None, max_steps=None):
    """Run (or resume) training. Returns a dict with the model, log records and best F1.

    ``max_steps`` stops early without changing the schedule (used for resume tests).
    """
    out_dir = Path(cfg.out_dir)
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % 2**32)
    if train_records is None:
        train_records, _ = scan_dataset(cfg.data_root, "train")
    train_set = ChangeDetectionDataset(train_records, train_augment=cfg.augment, seed=cfg.seed)
    if val_records is None and cfg.eval_every:
        try:
            val_records, _ = scan_dataset(cfg.data_root, cfg.eval_split)
        except ValueError:
            log.warning("no %s split found; skipping periodic evaluation", cfg.eval_split)
            val_records = None
    val_set = ChangeDetectionDataset(val_records) if val_records else None

    model = CDMaskFormer(cfg.model)
    optimizer = build_optimizer(model, cfg)
    criterion = SetCriterion(cfg.loss, cfg.deep_supervision, cfg.mask_loss_resolution)
    start, best_f1 = 0, -1.0
    if resume:
        model, _, payload = load_checkpoint(resume, cfg)
        optimizer = build_optimizer(model, cfg)
        optimizer.load_state_dict(payload["optimizer"])
        start = int(payload["step"])
        best_f1 = float(payload["extra"].get("best_f1", -1.0))
    logger = JsonlLogger(out_dir / "train.jsonl" if cfg.out_dir else None)
    n = len(train_set)
    stop = cfg.total_steps if max_steps is None else min(cfg.total_steps, max_steps)
    t0 = time.time()
    step = start
    for step in range(start, stop):
        model.train()
        set_lr(optimizer, step, cfg)
        idx = batch_indices(step, cfg.batch_size, n, cfg.seed)
        train_set.set_epoch((step * cfg.batch_size) // n)
        batch = collate([train_set[i] for i in idx])
        out = model(batch["t1"], batch["t2"])
        loss, parts = criterion(out["predictions"], batch["label"])
        if not torch.isfinite(loss):
            dump = out_dir / f"nonfinite_step{step}.pt"
            dump.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"step": step, "ids": batch["id"], "parts": _scalars(parts)}, dump)
            raise TrainingError(f"non-finite loss at step {step} on samples {batch['id']} (dump: {dump})")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        record = {
            "event": "step",
            "step": step,
            "lr": optimizer.param_groups[1]["lr"],
            "lr_backbone": optimizer.param_groups[0]["lr"],
            **_scalars(parts),
        }
        if step % cfg.log_every == 0 or step == stop - 1:
            record["elapsed"] = round(time.time() - t0, 2)
            logger(**record)
        else:
            logger.records.append(record)
        done = step + 1
        if val_set is not None and cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.total_steps):
            counts = evaluate_model(model, val_set, threshold=cfg.threshold)
            metrics = compute(counts)
            logger(event="eval", step=done, split=cfg.eval_split, **metrics)
            if metrics["F1"] > best_f1:
                best_f1 = metrics["F1"]
                if cfg.out_dir:
                    save_checkpoint(out_dir / "best.pt", model, optimizer, done, cfg, {"best_f1": best_f1})
        if cfg.out_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step{done}.pt", model, optimizer, done, cfg, {"best_f1": best_f1})
    final_step = stop if stop > start else start
    if cfg.out_dir:
        save_checkpoint(out_dir / "last.pt", model, optimizer, final_step, cfg, {"best_f1": best_f1})
    return {"model": model, "optimizer": optimizer, "records": logger.records, "best_f1": best_f1, "step": final_step}


@torch.no_grad()
def normalized_maps(model, dataset, batch_size=4):
    """Yield ``(normalized map, label)`` numpy pairs for each sample, in order."""
    model.eval()
    for s in range(0, len(dataset), batch_size):
        batch = collate([dataset[i] for i in range(s, min(s + batch_size, len(dataset)))])
        out = model.forward(*_padded(batch))["predictions"][-1]
        h, w = batch["label"].shape[-2:]
        _, f_norm = detect(
            out["pred_logits"], out["pred_masks"], out_size=_padded_size(h, w), crop=(h, w), t=0.5
        )
        for fn, lab in zip(f_norm, batch["label"]):
            yield fn, lab


def _padded_size(h, w, multiple=32):
    return (h + (-h) % multiple, w + (-w) % multiple)


def _padded(batch):
    from .backbone import pad_to_multiple

    return pad_to_multiple(batch["t1"])[0], pad_to_multiple(batch["t2"])[0]


def evaluate_model(model, dataset, threshold=0.5, batch_size=4) -> ConfusionCounts:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    counts = ConfusionCounts()
    for f_norm, lab in normalized_maps(model, dataset, batch_size):
        counts = accumulate(apply_threshold(f_norm, threshold), lab, counts)
    return counts


def evaluate(checkpoint, split="test", threshold=0.5, data_root=None, batch_size=4):
    """Metrics dict and counts of a checkpoint on one split."""
    model, cfg, _ = load_checkpoint(checkpoint)
    records, _ = scan_dataset(data_root or cfg.data_root, split)
    counts = evaluate_model(model, ChangeDetectionDataset(records), threshold, batch_size)
    return compute(counts), counts


def sweep_thresholds(model, dataset, thresholds=SWEEP_THRESHOLDS, batch_size=4):
    """``{T: ConfusionCounts}`` from one forward pass per sample."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    counts = {t: ConfusionCounts() for t in thresholds}
    for f_norm, lab in normalized_maps(model, dataset, batch_size):
        for t in thresholds:
            counts[t] = accumulate(apply_threshold(f_norm, t), lab, counts[t])
    return counts


def format_sweep(counts) -> str:
    lines = ["T     F1     Pre    Rec    IoU    OA"]
    for t, c in counts.items():
        m = compute(c)
        lines.append(
            f"{t:.1f}  " + "  ".join(f"{100 * m[k]:5.2f}" for k in ("F1", "Pre", "Rec", "IoU", "OA"))
        )
    return "\n".join(lines) + "\n"


def predict_files(checkpoint, t1_path, t2_path, out_path, threshold=0.5):
    model, _, _ = load_checkpoint(checkpoint)
    t1 = to_tensor(read_image(t1_path))[None]
    t2 = to_tensor(read_image(t2_path))[None]
    pred, _ = model.predict(t1, t2, threshold)
    Image.fromarray(pred[0].numpy().astype(np.uint8) * 255).save(out_path)
    return pred[0]


# white = TP, black = TN, red = FP, green = FN
ERROR_COLORS = {
    (1, 1): (255, 255, 255),
    (0, 0): (0, 0, 0),
    (1, 0): (255, 0, 0),
    (0, 1): (0, 255, 0),
}


def visualize(pred, gt) -> np.ndarray:
    """RGB uint8 error map of a binary prediction against the ground truth."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt shapes differ: {pred.shape} vs {gt.shape}")
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    for (p, g), color in ERROR_COLORS.items():
        out[(pred == bool(p)) & (gt == bool(g))] = color
    return out
