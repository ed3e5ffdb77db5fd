"""Classifier construction with partial freezing, grid search and fine-tuning with early stopping."""

from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .artifacts import digest, read_json, write_json
from .errors import ConfigurationError, NonFiniteLossError, ValidationError

log = logging.getLogger(__name__)

NUM_CLASSES = 4
FAMILIES = ("vit_deit", "resnet_cnn")
VIT_VARIANTS = {
    "tiny": "deit_tiny_patch16_224",
    "small": "deit_small_patch16_224",
    "base": "deit_base_patch16_224",
}
# Randomly initialized desk-scale variants; same token layout as DeiT.
VIT_MICRO = dict(img_size=224, patch_size=16, embed_dim=48, depth=6, num_heads=3, mlp_ratio=2.0)
OPTIMIZERS = ("adam", "sgd", "adagrad", "rmsprop")
DISPLAY_NAMES = {
    ("vit_deit", "tiny"): "Deit Tiny", ("vit_deit", "small"): "Deit Small",
    ("vit_deit", "base"): "Deit Base", ("vit_deit", "micro"): "Deit Micro",
    ("resnet_cnn", "r50"): "ResNet50", ("resnet_cnn", "micro"): "ResNet Micro",
}


@dataclass(frozen=True)
class ArchSpec:
    family: str = "vit_deit"
    variant: str = "base"
    patch_size: int = 16
    input_size: int = 224

    def __post_init__(self):
        allowed = {"vit_deit": {*VIT_VARIANTS, "micro"}, "resnet_cnn": {"r50", "micro"}}
        if self.family not in allowed:
            raise ConfigurationError(f"unknown model family {self.family!r}")
        if self.variant not in allowed[self.family]:
            raise ConfigurationError(f"unknown {self.family} variant {self.variant!r}")

    @property
    def token_count(self) -> int:
        return 1 + (self.input_size // self.patch_size) ** 2

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[(self.family, self.variant)]


@dataclass(frozen=True)
class TrainConfig:
    family: str = "vit_deit"
    variant: str = "base"
    unfrozen_layers: int = 0
    optimizer: str = "adam"
    learning_rate: float = 0.001
    dropout_p: float = 0.1
    l2_lambda: float = 0.0
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    scheduler_factor: float = 0.1
    scheduler_patience: int = 5
    sgd_momentum: float = 0.9
    hidden_dim: int = 512
    train_head: bool = True
    pretrained: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigurationError("patience must be smaller than max_epochs")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.unfrozen_layers < 0:
            raise ConfigurationError("unfrozen_layers must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(self.family, self.variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


class RiskClassifier(nn.Module):
    """Backbone producing a feature vector plus a fresh classification head."""

    def __init__(self, backbone: nn.Module, head: nn.Module, arch: ArchSpec, units: list):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.arch = arch
        self._units = units  # freezable backbone units, input end first

    def forward(self, x):
        return self.head(self.backbone(x))

    @property
    def units(self) -> list:
        return self._units


def _vit_backbone(arch: ArchSpec, pretrained: bool):
    import timm
    from timm.models.vision_transformer import VisionTransformer

    if arch.variant == "micro":
        if pretrained:
            raise ConfigurationError("the micro variant has no pretrained weights")
        net = VisionTransformer(num_classes=0, **VIT_MICRO)
    else:
        try:
            net = timm.create_model(VIT_VARIANTS[arch.variant], pretrained=pretrained, num_classes=0)
        except Exception as exc:
            raise ConfigurationError(f"cannot load pretrained {arch.display_name} weights: {exc}") from exc
    return net, list(net.blocks), net.num_features


def _resnet_backbone(arch: ArchSpec, pretrained: bool):
    from torchvision.models import ResNet, ResNet50_Weights, resnet50
    from torchvision.models.resnet import BasicBlock

    if arch.variant == "micro":
        if pretrained:
            raise ConfigurationError("the micro variant has no pretrained weights")
        net = ResNet(BasicBlock, [1, 1, 1, 1])
    else:
        try:
            net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2 if pretrained else None)
        except Exception as exc:
            raise ConfigurationError(f"cannot load pretrained ResNet50 weights: {exc}") from exc
    dim = net.fc.in_features
    net.fc = nn.Identity()
    stem = nn.ModuleList([net.conv1, net.bn1])
    return net, [stem, net.layer1, net.layer2, net.layer3, net.layer4], dim


def build_classifier(
    arch: ArchSpec,
    unfrozen_layers: int,
    dropout_p: float,
    pretrained: bool = False,
    hidden_dim: int = 512,
    weights_path=None,
) -> RiskClassifier:
    """Backbone with only its last ``unfrozen_layers`` units trainable, plus a new 4-way head.

    Units are encoder blocks for the transformer and (stem, 4 residual stages)
    for the CNN, counted from the output end. The transformer head is
    dropout -> linear; the CNN head is dropout -> linear(hidden) -> ReLU ->
    dropout -> linear.
    """
    if arch.family == "vit_deit":
        backbone, units, dim = _vit_backbone(arch, pretrained)
        head = nn.Sequential(nn.Dropout(dropout_p), nn.Linear(dim, NUM_CLASSES))
    else:
        backbone, units, dim = _resnet_backbone(arch, pretrained)
        head = nn.Sequential(
            nn.Dropout(dropout_p), nn.Linear(dim, hidden_dim), nn.ReLU(),
            nn.Dropout(dropout_p), nn.Linear(hidden_dim, NUM_CLASSES),
        )
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        missing, unexpected = backbone.load_state_dict(state, strict=False)
        if unexpected:
            log.warning("ignored %d unexpected backbone keys", len(unexpected))
    if unfrozen_layers > len(units):
        raise ConfigurationError(f"{arch.display_name} has only {len(units)} freezable units")
    model = RiskClassifier(backbone, head, arch, units)
    set_trainable(model, unfrozen_layers)
    return model


def set_trainable(model: RiskClassifier, unfrozen_layers: int, train_head: bool = True) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    if unfrozen_layers:
        for unit in model.units[-unfrozen_layers:]:
            for p in unit.parameters():
                p.requires_grad_(True)
    for p in model.head.parameters():
        p.requires_grad_(train_head)


def build_from_config(config: TrainConfig, weights_path=None) -> RiskClassifier:
    torch.manual_seed(config.seed)
    model = build_classifier(
        config.arch, config.unfrozen_layers, config.dropout_p, config.pretrained, config.hidden_dim, weights_path
    )
    if not config.train_head:
        set_trainable(model, config.unfrozen_layers, train_head=False)
    return model


def trainable_parameters(model: nn.Module) -> list:
    return [p for p in model.parameters() if p.requires_grad]


def l2_penalty(model: nn.Module) -> torch.Tensor:
    params = trainable_parameters(model)
    if not params:
        return torch.zeros(())
    return sum((p**2).sum() for p in params)


def training_loss(logits: torch.Tensor, labels: torch.Tensor, model: nn.Module | None, l2_lambda: float) -> torch.Tensor:
    """Mean cross-entropy plus ``l2_lambda`` times the sum of squared trainable weights."""
    if logits.ndim != 2:
        raise ValidationError(f"logits must be (batch, classes), got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValidationError(f"labels must lie in 0..{logits.shape[1] - 1}")
    loss = F.cross_entropy(logits, labels)
    if l2_lambda and model is not None:
        loss = loss + l2_lambda * l2_penalty(model)
    return loss


def make_optimizer(config: TrainConfig, params):
    name, lr = config.optimizer, config.learning_rate
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=config.sgd_momentum)
    if name == "adagrad":
        return torch.optim.Adagrad(params, lr=lr)
    return torch.optim.RMSprop(params, lr=lr)


class EarlyStopping:
    """Stop once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record epoch (1-based); returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


def early_stopping_epoch(val_losses, patience: int, max_epochs: int) -> tuple:
    """(stopped_epoch, best_epoch) for a given per-epoch validation loss sequence."""
    rule = EarlyStopping(patience)
    epoch = 0
    for epoch, loss in enumerate(val_losses[:max_epochs], start=1):
        if rule.update(epoch, loss):
            break
    return epoch, rule.best_epoch


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _loader(data, batch_size, shuffle, seed):
    if isinstance(data, torch.utils.data.DataLoader):
        return data
    gen = torch.Generator().manual_seed(seed)
    return torch.utils.data.DataLoader(data, batch_size=batch_size, shuffle=shuffle, generator=gen)


@torch.no_grad()
def evaluate_loss_accuracy(model: nn.Module, loader) -> tuple:
    """Mean cross-entropy (no weight penalty) and accuracy over a loader."""
    model.eval()
    total, loss_sum, correct = 0, 0.0, 0
    for x, y in loader:
        logits = model(x)
        loss_sum += F.cross_entropy(logits, y, reduction="sum").item()
        correct += int((logits.argmax(1) == y).sum())
        total += len(y)
    if total == 0:
        raise ValidationError("validation set is empty")
    return loss_sum / total, correct / total


def finetune(
    model: nn.Module,
    config: TrainConfig,
    train,
    val,
    evaluator: Callable | None = None,
    on_epoch: Callable | None = None,
    early_stopping: bool = True,
) -> tuple:
    """Train with early stopping and reduce-on-plateau scheduling.

    ``evaluator(model) -> (val_loss, val_accuracy)`` replaces the default
    evaluation on ``val``. Returns ``(history, best_state_dict)`` where the
    state dict is a copy taken at the best validation epoch.
    """
    torch.manual_seed(config.seed)
    train_loader = _loader(train, config.batch_size, True, config.seed)
    val_loader = _loader(val, config.batch_size, False, config.seed) if val is not None else None
    evaluator = evaluator or (lambda m: evaluate_loss_accuracy(m, val_loader))
    params = trainable_parameters(model)
    opt = make_optimizer(config, params) if params else None
    sched = (
        torch.optim.lr_scheduler.ReduceLROnPlateau(
            opt, mode="min", factor=config.scheduler_factor, patience=config.scheduler_patience
        )
        if opt is not None else None
    )
    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, config.max_epochs + 1):
        dataset = getattr(train_loader, "dataset", None)
        if hasattr(dataset, "set_epoch"):
            dataset.set_epoch(epoch)
        model.train()
        lr = opt.param_groups[0]["lr"] if opt is not None else 0.0
        running, seen = 0.0, 0
        for batch_idx, (x, y) in enumerate(train_loader):
            logits = model(x)
            loss = training_loss(logits, y, model, config.l2_lambda)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite training loss at epoch {epoch}, batch {batch_idx}",
                    diagnostics={
                        "epoch": epoch, "batch": batch_idx, "learning_rate": lr,
                        "logits_abs_max": float(logits.detach().abs().nan_to_num(posinf=np.inf).max()),
                        "input_mean": float(x.float().mean()), "input_std": float(x.float().std()),
                    },
                )
            if opt is not None:
                opt.zero_grad()
                loss.backward()
                opt.step()
            running += loss.item() * len(y)
            seen += len(y)
        val_loss, val_acc = evaluator(model)
        history.train_loss.append(running / max(seen, 1))
        history.val_loss.append(float(val_loss))
        history.val_accuracy.append(float(val_acc))
        history.learning_rate.append(lr)
        if sched is not None:
            sched.step(val_loss)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        history.stopped_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, history)
        if stop and early_stopping:
            break
    history.best_epoch = stopper.best_epoch
    return history, best_state


@dataclass
class TrialResult:
    config: TrainConfig
    val_accuracy_change_pp: float
    final_val_loss: float
    history: TrainHistory | None = None

    def as_row(self) -> dict:
        c = self.config
        return {
            "model": c.arch.display_name,
            "layers": c.unfrozen_layers,
            "optimizer": {"adam": "Adam", "sgd": "SGD", "adagrad": "Adagrad", "rmsprop": "RMSprop"}[c.optimizer],
            "learning_rate": c.learning_rate,
            "val_acc_change_pp": round(self.val_accuracy_change_pp, 2),
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "row": self.as_row(),
            "val_accuracy_change_pp": self.val_accuracy_change_pp,
            "final_val_loss": self.final_val_loss,
        }


def expand_grid(grid: dict, base: TrainConfig = TrainConfig()) -> list:
    """Cartesian product of option lists, e.g. ``{"learning_rate": [0.01, 0.005]}``."""
    keys = sorted(grid)
    return [replace(base, **dict(zip(keys, values))) for values in itertools.product(*(grid[k] for k in keys))]


def grid_search(
    grid,
    train,
    val,
    epochs: int = 15,
    model_factory: Callable | None = None,
) -> list:
    """Train every configuration for ``epochs`` epochs; rank by validation-accuracy gain.

    The gain is last-epoch minus first-epoch validation accuracy in percentage
    points. Early stopping is disabled during the search. Ties keep grid order.
    """
    configs = expand_grid(grid) if isinstance(grid, dict) else list(grid)
    if not configs:
        raise ConfigurationError("grid search needs at least one configuration")
    factory = model_factory or build_from_config
    results = []
    for cfg in configs:
        run_cfg = replace(cfg, max_epochs=epochs, patience=0)
        torch.manual_seed(cfg.seed)
        model = factory(cfg)
        history, _ = finetune(model, run_cfg, train, val, early_stopping=False)
        acc = history.val_accuracy
        change = 100.0 * (acc[-1] - acc[0])
        results.append(TrialResult(cfg, change, history.val_loss[-1], history))
    order = sorted(range(len(results)), key=lambda i: (-results[i].val_accuracy_change_pp, i))
    return [results[i] for i in order]


def save_checkpoint(path, model: nn.Module, config: TrainConfig, history: TrainHistory | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``<path>`` (state dict) and ``<path>.json`` (config, history, seed, version)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {
        "config": config.to_dict(),
        "history": history.to_dict() if history else None,
        "seed": config.seed,
        "code_version": __version__,
        "config_hash": digest(config.to_dict()),
    }
    meta.update(extra or {})
    write_json(path.with_suffix(path.suffix + ".json"), meta)
    return path


def load_checkpoint(path) -> tuple:
    path = Path(path)
    meta = read_json(path.with_suffix(path.suffix + ".json"))
    config = TrainConfig.from_dict(meta["config"])
    model = build_classifier(config.arch, config.unfrozen_layers, config.dropout_p, False, config.hidden_dim)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, config, meta
