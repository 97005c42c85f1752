"""Training loop with AdamW, validation-F1 plateau schedule and checkpointing."""
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .exceptions import CheckpointError, ConfigurationError, TrainingDiverged
from .losses import LossReport, multiclass_ssl_loss, threshold, total_loss_binary, total_loss_contrastive
from .metrics import ConfusionCounts, MetricsReport, accumulate, compute_metrics
from .network import ChangeDetectionNet, NetworkConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_VARIANTS = ("binary_ssl", "contrastive", "multiclass_ssl", "none")


@dataclass
class TrainConfig:
    learning_rate: float = 0.002
    weight_decay: float = 0.001
    batch_size: int = 8
    plateau_patience_epochs: int = 10
    plateau_factor: float = 0.3
    max_reductions_before_stop: int = 3
    validation_start_epoch: int = 30
    loss_variant: str = "binary_ssl"
    seed: int = 0
    max_epochs: int = 300
    max_steps: Optional[int] = None
    aux_warmup_steps: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience_epochs < 1:
            raise ConfigurationError("plateau_patience_epochs must be >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigurationError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    current_lr: float = 0.002
    best_val_f1: float = -math.inf
    best_epoch: Optional[int] = None
    epochs_since_improvement: int = 0
    reductions_done: int = 0
    stopped: bool = False


class PlateauSchedule:
    """Learning rate ``base * factor**k`` where ``k`` counts plateaus.

    A plateau is ``patience`` consecutive validations without a strictly
    higher F1. Training stops instead of performing reduction number
    ``max_reductions + 1``.
    """

    def __init__(self, cfg: TrainConfig, state: TrainState):
        self.cfg = cfg
        self.state = state

    @property
    def lr(self) -> float:
        return self.cfg.learning_rate * self.cfg.plateau_factor ** self.state.reductions_done

    def update(self, f1: float, epoch: int) -> str:
        s = self.state
        if f1 > s.best_val_f1:
            s.best_val_f1 = f1
            s.best_epoch = epoch
            s.epochs_since_improvement = 0
            return "improved"
        s.epochs_since_improvement += 1
        if s.epochs_since_improvement < self.cfg.plateau_patience_epochs:
            return "wait"
        if s.reductions_done >= self.cfg.max_reductions_before_stop:
            s.stopped = True
            return "stop"
        s.reductions_done += 1
        s.epochs_since_improvement = 0
        s.current_lr = self.lr
        return "reduced"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _batch_to_pair(batch: Dict[str, torch.Tensor]):
    return batch["t1"], batch["t2"]


@torch.no_grad()
def predict_batches(model: nn.Module, dataset: Dataset, batch_size: int = 8):
    was_training = model.training
    model.eval()
    try:
        for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            yield batch, model(*_batch_to_pair(batch))
    finally:
        model.train(was_training)


def validate(model: nn.Module, dataset: Dataset, batch_size: int = 8) -> MetricsReport:
    """Change-mask metrics over a whole split, threshold 0.5."""
    if len(dataset) == 0:
        raise ValueError("validation split is empty")
    counts = ConfusionCounts()
    for batch, out in predict_batches(model, dataset, batch_size):
        counts = accumulate(threshold(out.change).numpy().astype(bool), batch["change"].numpy().astype(bool), counts)
    return compute_metrics(counts)


def compute_loss(outputs, batch, variant: str, use_aux: bool = True) -> LossReport:
    label = batch["change"]
    if variant == "binary_ssl":
        return total_loss_binary(outputs, label, use_aux=use_aux)
    if variant == "contrastive":
        return total_loss_contrastive(outputs, label, use_aux=use_aux)
    if variant == "multiclass_ssl":
        return multiclass_ssl_loss(outputs, label, batch["seg1"][:, 0].long(), batch["seg2"][:, 0].long(),
                                   use_aux=use_aux)
    return total_loss_binary(outputs, label, use_aux=False)


class Trainer:
    """Runs epochs, validates from ``validation_start_epoch`` on, adjusts the
    learning rate on plateaus and keeps best/last checkpoints.

    ``validator`` replaces the default validation (``validate`` on ``val_data``);
    it receives ``(trainer, epoch)`` and returns a ``MetricsReport``.
    """

    def __init__(
        self,
        model: ChangeDetectionNet,
        cfg: TrainConfig,
        train_data: Optional[Dataset] = None,
        val_data: Optional[Dataset] = None,
        run_dir=None,
        validator: Optional[Callable[["Trainer", int], MetricsReport]] = None,
    ):
        self.model = model
        self.cfg = cfg
        self.train_data = train_data
        self.val_data = val_data
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.validator = validator
        self.state = TrainState(current_lr=cfg.learning_rate)
        self.schedule = PlateauSchedule(cfg, self.state)
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self.log_path = self.run_dir / "log.jsonl"

    # ------------------------------------------------------------------ logging
    def _log(self, record: dict) -> None:
        if self.run_dir is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # ------------------------------------------------------------------ steps
    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def train_step(self, batch: Dict[str, torch.Tensor]) -> LossReport:
        self.model.train()
        outputs = self.model(*_batch_to_pair(batch))
        use_aux = self.state.step >= self.cfg.aux_warmup_steps
        report = compute_loss(outputs, batch, self.cfg.loss_variant, use_aux)
        if not torch.isfinite(report.total):
            self._dump_divergence(report)
            raise TrainingDiverged(f"non-finite loss at step {self.state.step}: {report.as_dict()}")
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        self.state.step += 1
        return report

    def _dump_divergence(self, report: LossReport) -> None:
        if self.run_dir is not None:
            dump = {"state": asdict(self.state), "loss": report.as_dict()}
            (self.run_dir / "diverged.json").write_text(json.dumps(dump, indent=2, sort_keys=True, default=str))

    def _loader(self, epoch: int) -> DataLoader:
        if hasattr(self.train_data, "set_epoch"):
            self.train_data.set_epoch(epoch)
        gen = torch.Generator().manual_seed(self.cfg.seed * 100003 + epoch)
        return DataLoader(self.train_data, batch_size=self.cfg.batch_size, shuffle=True,
                          drop_last=True, generator=gen)

    def _budget_left(self) -> bool:
        return self.cfg.max_steps is None or self.state.step < self.cfg.max_steps

    def run_epoch(self, epoch: int) -> None:
        if self.train_data is None:
            return
        for batch in self._loader(epoch):
            if not self._budget_left():
                break
            report = self.train_step(batch)
            self._log({"kind": "step", "epoch": epoch, "step": self.state.step, "lr": self.state.current_lr,
                       "loss": report.as_dict()})

    def validate(self, epoch: int) -> MetricsReport:
        if self.validator is not None:
            return self.validator(self, epoch)
        if self.val_data is None:
            raise ValueError("no validation data")
        return validate(self.model, self.val_data, self.cfg.batch_size)

    def end_epoch(self, epoch: int) -> str:
        """Validation, schedule update and checkpointing after ``epoch``."""
        self.state.epoch = epoch
        action = "skip"
        if epoch >= self.cfg.validation_start_epoch:
            report = self.validate(epoch)
            action = self.schedule.update(report.f1, epoch)
            self._set_lr(self.state.current_lr)
            self._log({"kind": "validation", "epoch": epoch, "step": self.state.step,
                       "lr": self.state.current_lr, "action": action, "metrics": report.as_dict()})
            if action == "improved":
                self.save("best.pt")
        self.save("last.pt")
        return action

    def fit(self) -> TrainState:
        if self.state.stopped:
            return self.state
        self._set_lr(self.state.current_lr)
        if self.run_dir is not None and self.state.step == 0 and self.state.epoch == 0:
            self.log_path.write_text("")
        start = self.state.epoch + 1
        for epoch in range(start, self.cfg.max_epochs + 1):
            self.run_epoch(epoch)
            action = self.end_epoch(epoch)
            if action == "stop" or not self._budget_left():
                break
        if self.run_dir is not None and not (self.run_dir / "best.pt").exists():
            # validation never ran (short budget): last weights are the best known
            self.save("best.pt")
        return self.state

    # ------------------------------------------------------------------ checkpoints
    def save(self, name: str) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = self.run_dir / name
        save_checkpoint(path, self.model, self.state, self.optimizer, self.cfg)
        return path

    def resume(self, path) -> TrainState:
        ckpt = load_checkpoint(path, self.model)
        if ckpt.get("optimizer") is not None:
            self.optimizer.load_state_dict(ckpt["optimizer"])
        self.state.__dict__.update(ckpt["train_state"])
        self.schedule = PlateauSchedule(self.cfg, self.state)
        torch.set_rng_state(ckpt["rng_state"])
        self._set_lr(self.state.current_lr)
        return self.state


def save_checkpoint(path, model: ChangeDetectionNet, state: Optional[TrainState] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    train_cfg: Optional[TrainConfig] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": model.cfg.to_dict(),
        "model": model.state_dict(),
        "train_state": asdict(state) if state is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "rng_state": torch.get_rng_state(),
    }
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    return ckpt


def load_checkpoint(path, model: Optional[ChangeDetectionNet] = None) -> dict:
    """Read a checkpoint and, when ``model`` is given, load its weights after
    checking every tensor name and shape."""
    ckpt = read_checkpoint(path)
    if model is not None:
        check_compatible(ckpt["model"], model)
        model.load_state_dict(ckpt["model"])
    return ckpt


def check_compatible(weights: Dict[str, torch.Tensor], model: nn.Module) -> None:
    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in weights:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tuple(weights[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(weights[name].shape)} in the checkpoint, "
                f"model expects {tuple(tensor.shape)}"
            )
    extra = [n for n in weights if n not in expected]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")


def model_from_checkpoint(path) -> Tuple[ChangeDetectionNet, dict]:
    ckpt = read_checkpoint(path)
    with torch.random.fork_rng(devices=[]):  # building the model must not consume the global RNG
        model = ChangeDetectionNet(NetworkConfig.from_dict(ckpt["network_config"]))
    check_compatible(ckpt["model"], model)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt
