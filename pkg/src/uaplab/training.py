"""Training loops: plain training with early stopping and two-stage fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .analysis import quadratic_kappa
from .data import EYEPACS_PROPORTIONS, LabeledDataset, generate_synthetic_dataset
from .errors import DegenerateMarginals, EmptyDataset, LabelOutOfRange
from .models import ClassifierModel, argmax_lowest, forward_logits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs_pretrain: int = 15
    max_epochs_finetune: int = 10
    early_stop_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_epochs_pretrain < 0 or self.max_epochs_finetune < 0:
            raise ValueError("epoch budgets must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_kappa: float | None
    val_loss: float | None = None


@dataclass
class TrainResult:
    model: ClassifierModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def _make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return torch.optim.SGD(params, lr=config.learning_rate)


def validation_scores(model: ClassifierModel, dataset: LabeledDataset) -> tuple[float, float]:
    """Quadratic kappa and mean cross-entropy on ``dataset``."""
    logits = torch.from_numpy(forward_logits(model, dataset.images))
    loss = F.cross_entropy(logits, torch.from_numpy(dataset.grades)).item()
    try:
        kappa = quadratic_kappa(dataset.grades, argmax_lowest(logits.numpy()),
                                model.num_classes).value
    except DegenerateMarginals:
        kappa = 0.0
    return kappa, loss


def train(model: ClassifierModel, dataset: LabeledDataset, config: TrainConfig = TrainConfig(),
          validation: LabeledDataset | None = None, max_epochs: int | None = None,
          trainable: str = "all", seed_offset: int = 0) -> TrainResult:
    """Train ``model`` in place with cross-entropy and minibatch shuffling.

    Early stopping tracks the validation quadratic kappa, with validation loss
    breaking ties (kappa sits at exactly 0 while a model still predicts one
    class).  Training ends once neither has improved for ``early_stop_patience``
    epochs and the best weights are restored.
    ``trainable="head"`` freezes every body parameter.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if dataset.grades.max() >= model.num_classes:
        raise LabelOutOfRange(f"labels exceed num_classes={model.num_classes}")
    epochs = config.max_epochs_pretrain if max_epochs is None else max_epochs

    names = model.head_parameter_names() if trainable == "head" else None
    params = []
    for name, p in model.net.named_parameters():
        p.requires_grad_(names is None or name in names)
        if p.requires_grad:
            params.append(p)
    result = TrainResult(model=model)
    if epochs == 0 or not params:
        _unfreeze(model)
        return result

    opt = _make_optimizer(params, config)
    x_all = torch.from_numpy(dataset.images).to(model.dtype)
    y_all = torch.from_numpy(dataset.grades)
    gen = torch.Generator().manual_seed(config.seed + seed_offset)

    best_score, best_state, since_best = (-np.inf, np.inf), None, 0
    for epoch in range(1, epochs + 1):
        model.net.train()
        order = torch.randperm(len(dataset), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        model.net.eval()

        if validation is None:
            result.history.append(EpochRecord(epoch, total / count, None))
            continue
        kappa, val_loss = validation_scores(model, validation)
        result.history.append(EpochRecord(epoch, total / count, kappa, val_loss))
        log.debug("epoch %d loss %.4f val_kappa %.4f val_loss %.4f",
                  epoch, total / count, kappa, val_loss)
        score = (kappa, val_loss)
        if kappa > best_score[0] or (kappa == best_score[0] and val_loss < best_score[1]):
            best_score, since_best, result.best_epoch = score, 0, epoch
            best_state = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                result.stopped_early = True
                break

    if best_state is not None:
        model.net.load_state_dict(best_state)
    elif validation is None:
        result.best_epoch = len(result.history)
    _unfreeze(model)
    return result


def _unfreeze(model: ClassifierModel) -> None:
    for p in model.net.parameters():
        p.requires_grad_(True)


def two_stage_finetune(model: ClassifierModel, dataset: LabeledDataset,
                       config: TrainConfig = TrainConfig(),
                       validation: LabeledDataset | None = None) -> tuple[TrainResult, TrainResult]:
    """Head-only training for ``max_epochs_pretrain`` epochs, then end-to-end for
    ``max_epochs_finetune`` epochs; each stage early-stops independently."""
    head = train(model, dataset, config, validation, config.max_epochs_pretrain,
                 trainable="head", seed_offset=0)
    full = train(model, dataset, config, validation, config.max_epochs_finetune,
                 trainable="all", seed_offset=10_000)
    return head, full


def pretrain_source_task(model: ClassifierModel, config: TrainConfig = TrainConfig(),
                         source: LabeledDataset | None = None, n: int = 2000,
                         seed: int = 12345) -> TrainResult:
    """Stand-in for ImageNet initialization: end-to-end training on a source corpus.

    Without ``source`` a synthetic corpus with the EyePACS class balance is drawn;
    callers that preprocess their target data should pass a preprocessed source.
    """
    if source is None:
        c, h, w = model.input_shape
        if h != w:
            raise ValueError("synthetic source task needs square inputs")
        source = generate_synthetic_dataset(n, EYEPACS_PROPORTIONS, h, seed=seed, channels=c,
                                            prefix="src")
    return train(model, source, config, None, config.max_epochs_pretrain, seed_offset=20_000)
