"""Adversarial fine-tuning, majority-vote ensembles and transfer-attack matrices."""

from __future__ import annotations

import datetime as _dt
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import confusion_matrix, kappa_from_confusion
from .attacks import PerturbationVector, perturb_dataset
from .data import LabeledDataset, concat
from .errors import (
    EmptyDataset,
    EmptyVotes,
    EmptyZoo,
    LabelOutOfRange,
    MissingPerturbation,
    ShapeMismatch,
    SourceMismatch,
)
from .models import ClassifierModel, predict, predict_proba
from .training import TrainConfig, TrainResult, train

ENSEMBLE = "ensemble"


@dataclass
class ZooMember:
    model_id: str
    model: ClassifierModel
    perturbation: PerturbationVector | None = None


class ModelZoo:
    """Ordered collection of models sharing class count and input shape."""

    def __init__(self, members=()):
        self.members: list[ZooMember] = []
        for m in members:
            if isinstance(m, ZooMember):
                self.add(m.model_id, m.model, m.perturbation)
            else:
                self.add(*m)

    def add(self, model_id: str, model: ClassifierModel, perturbation=None) -> None:
        if model_id in self.ids():
            raise ValueError(f"duplicate model id {model_id!r}")
        if self.members:
            ref = self.members[0].model
            if (model.num_classes, model.input_shape) != (ref.num_classes, ref.input_shape):
                raise ShapeMismatch(f"{model_id} disagrees with the zoo on classes or input shape")
        self.members.append(ZooMember(model_id, model, perturbation))

    def ids(self) -> list[str]:
        return [m.model_id for m in self.members]

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, model_id: str) -> ZooMember:
        for m in self.members:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def subset(self, ids) -> "ModelZoo":
        return ModelZoo([self[i] for i in ids])

    @property
    def num_classes(self) -> int:
        if not self.members:
            raise EmptyZoo("zoo has no members")
        return self.members[0].model.num_classes


# ---------------------------------------------------------------- voting

def _resolve_votes(counts: np.ndarray, mean_probs: np.ndarray | None) -> np.ndarray:
    """Pick the modal class per row; ties go to the highest mean probability,
    then to the lower class index."""
    tied = counts == counts.max(axis=1, keepdims=True)
    if mean_probs is None:
        return np.argmax(tied, axis=1)
    score = np.where(tied, mean_probs, -np.inf)
    return np.argmax(score, axis=1)


def majority_vote(labels, confidences=None, num_classes: int | None = None) -> int:
    """Modal label of one sample's votes.

    ``confidences`` holds one class-probability row per voter and is used only
    to break ties.
    """
    votes = np.asarray(labels, dtype=np.int64).reshape(-1)
    if votes.size == 0:
        raise EmptyVotes("no votes to aggregate")
    if confidences is not None:
        conf = np.asarray(confidences, dtype=np.float64)
        if conf.shape[0] != votes.size:
            raise ShapeMismatch("need one confidence row per vote")
        num_classes = conf.shape[1]
    K = num_classes if num_classes is not None else int(votes.max()) + 1
    if votes.min() < 0 or votes.max() >= K:
        raise LabelOutOfRange(f"votes must lie in 0..{K - 1}")
    counts = np.bincount(votes, minlength=K)[None]
    mean = None
    if confidences is not None:
        # fsum is exactly rounded, so voter order cannot change the tie-break
        mean = np.array([[math.fsum(conf[:, k]) / votes.size for k in range(K)]])
    return int(_resolve_votes(counts, mean)[0])


def ensemble_predict(zoo: ModelZoo, batch, members=None) -> np.ndarray:
    """Per-item majority vote over the zoo (or the listed ``members``)."""
    if members is not None:
        zoo = zoo.subset(members)
    if len(zoo) == 0:
        raise EmptyZoo("cannot ensemble an empty zoo")
    # canonical member order keeps the probability sums order independent
    ordered = sorted(zoo, key=lambda m: m.model_id)
    probs = np.stack([predict_proba(m.model, batch) for m in ordered])  # M x N x K
    preds = np.argmax(probs, axis=2)
    K = probs.shape[2]
    counts = np.stack([(preds == k).sum(axis=0) for k in range(K)], axis=1)
    mean = np.sort(probs, axis=0).sum(axis=0) / len(ordered)
    return _resolve_votes(counts, mean)


def predict_labels(model_or_zoo, images) -> np.ndarray:
    if isinstance(model_or_zoo, ModelZoo):
        return ensemble_predict(model_or_zoo, images)
    return predict(model_or_zoo, images)


def evaluate_model(model_or_zoo, dataset: LabeledDataset, num_classes: int = 5) -> dict:
    """Quadratic kappa, accuracy and confusion matrix of predictions against grades."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    if isinstance(model_or_zoo, ModelZoo):
        num_classes = model_or_zoo.num_classes
    elif isinstance(model_or_zoo, ClassifierModel):
        num_classes = model_or_zoo.num_classes
    preds = predict_labels(model_or_zoo, dataset.images)
    cm = confusion_matrix(dataset.grades, preds, num_classes)
    return {
        "quadratic_kappa": kappa_from_confusion(cm),
        "accuracy": float(np.trace(cm) / cm.sum()),
        "confusion_matrix": cm.tolist(),
        "n": int(cm.sum()),
    }


# ---------------------------------------------------------------- transfer matrix

@dataclass
class TransferMatrixReport:
    rows: list
    cols: list
    kappa: list
    dataset_sha256: str
    configs: dict = field(default_factory=dict)
    title: str = ""
    split: str = "test"
    created: str = ""

    def to_dict(self) -> dict:
        return {"rows": list(self.rows), "cols": list(self.cols),
                "kappa": [[float(v) for v in row] for row in self.kappa],
                "dataset_sha256": self.dataset_sha256, "configs": self.configs,
                "title": self.title, "split": self.split, "created": self.created}

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrixReport":
        return cls(list(d["rows"]), list(d["cols"]), [list(r) for r in d["kappa"]],
                   d["dataset_sha256"], d.get("configs", {}), d.get("title", ""),
                   d.get("split", "test"), d.get("created", ""))

    def cell(self, source: str, target: str) -> float:
        return self.kappa[self.rows.index(source)][self.cols.index(target)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.kappa, dtype=np.float64)

    def diagonal(self) -> list[float]:
        return [self.cell(r, r) for r in self.rows]

    def off_diagonal(self) -> list[float]:
        return [self.cell(r, c) for r in self.rows for c in self.rows if c != r]


def transfer_matrix(zoo: ModelZoo, test: LabeledDataset, jobs: int = 1, title: str = "",
                    split: str = "test", configs: dict | None = None) -> TransferMatrixReport:
    """Kappa of every target model and the ensemble on the test set perturbed by
    each member's vector; rows are perturbation sources."""
    if len(zoo) == 0:
        raise EmptyZoo("cannot build a transfer matrix from an empty zoo")
    if len(test) == 0:
        raise EmptyDataset("test set is empty")
    for m in zoo:
        if m.perturbation is None:
            raise MissingPerturbation(f"model {m.model_id!r} has no perturbation vector")
    ids = zoo.ids()
    cols = ids + [ENSEMBLE]
    targets = [m.model for m in zoo] + [zoo]

    def row(source: ZooMember):
        perturbed = perturb_dataset(test, source.perturbation)
        return [evaluate_model(t, perturbed)["quadratic_kappa"] for t in targets]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(row, zoo.members))
    else:
        values = [row(m) for m in zoo]
    return TransferMatrixReport(
        rows=ids, cols=cols, kappa=values, dataset_sha256=test.sha256(),
        configs=configs or {}, title=title, split=split,
        created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))


# ---------------------------------------------------------------- adversarial fine-tuning

def mix_clean(clean: LabeledDataset, perturbed: LabeledDataset, mix_ratio: float,
              seed: int = 0) -> LabeledDataset:
    """Replace a seeded ``mix_ratio`` share of the perturbed items by their clean originals."""
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must lie in [0, 1]")
    n_clean = int(round(mix_ratio * len(clean)))
    if n_clean == 0:
        return perturbed
    keep_clean = np.zeros(len(clean), dtype=bool)
    keep_clean[np.random.default_rng(seed).permutation(len(clean))[:n_clean]] = True
    images = np.where(keep_clean[:, None, None, None], clean.images, perturbed.images)
    return perturbed.with_images(images)


def adversarial_finetune(model: ClassifierModel, train_set: LabeledDataset,
                         v_self: PerturbationVector, config: TrainConfig = TrainConfig(),
                         mix_ratio: float = 0.0, validation: LabeledDataset | None = None,
                         model_id: str | None = None, allow_foreign: bool = False) -> TrainResult:
    """Fine-tune ``model`` end to end on ``train_set`` perturbed by its own vector.

    ``mix_ratio`` keeps that share of training items clean (0 = adversarial only).
    Early stopping watches ``validation`` perturbed the same way.
    """
    owner = model_id or model.arch_id
    if not allow_foreign and v_self.source_model != owner:
        raise SourceMismatch(
            f"perturbation was generated by {v_self.source_model!r}, not {owner!r}")
    adv_train = mix_clean(train_set, perturb_dataset(train_set, v_self), mix_ratio, config.seed)
    adv_val = None
    if validation is not None:
        adv_val = perturb_dataset(validation, v_self)
        if mix_ratio > 0:
            adv_val = concat([adv_val, validation], role=validation.role)
    return train(model, adv_train, config, adv_val, config.max_epochs_finetune,
                 seed_offset=30_000)
