"""Experiment configuration and the end-to-end desk-scale reproduction run."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .analysis import agreement_level, paired_ttest, render_report
from .attacks import (
    AttackConfig,
    PerturbationVector,
    fgsm_dataset,
    generate_uap,
    perturb_dataset,
    save_perturbation,
)
from .checkpoint import save_checkpoint
from .data import (
    APTOS_PROPORTIONS,
    EYEPACS_PROPORTIONS,
    LabeledDataset,
    generate_synthetic_dataset,
    load_raw_images,
    split_perturb_robust,
    stratified_kfold,
)
from .errors import DegenerateVariance, TargetNotReached, UAPLabError
from .models import build_model
from .preprocess import PreprocessConfig, preprocess_batch
from .provenance import atomic_write_bytes, atomic_write_text, config_hash, write_meta
from .robustness import ModelZoo, adversarial_finetune, evaluate_model, transfer_matrix
from .training import TrainConfig, pretrain_source_task, two_stage_finetune

log = logging.getLogger(__name__)

DEFAULT_ZOO = (("small-cnn-a", 0), ("small-cnn-b", 1), ("small-cnn-c", 2))


class StageError(UAPLabError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class DatasetSpec:
    source: str = "synthetic"          # "synthetic" or "csv"
    n: int = 2000
    image_size: int = 32
    proportions: tuple = APTOS_PROPORTIONS
    seed: int = 0
    csv: str | None = None
    image_dir: str | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    preprocess: PreprocessConfig = field(default_factory=lambda: PreprocessConfig(target_size=32))
    zoo: list = field(default_factory=lambda: [{"arch": a, "seed": s} for a, s in DEFAULT_ZOO])
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    dp_fraction: float = 0.5
    eval_split: str = "test"           # "test" (held-out fold) or "robust" (D_r)
    mix_ratio: float = 0.0
    folds: int = 4
    split_seed: int = 0
    fgsm_eps: float | None = None      # None -> attack.xi
    pretrain_source: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.eval_split not in ("test", "robust"):
            raise ValueError("eval_split must be 'test' or 'robust'")
        if not 0.0 < self.dp_fraction < 1.0:
            raise ValueError("dp_fraction must lie strictly between 0 and 1")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.folds < 3:
            raise ValueError("need at least 3 folds (test, validation, train)")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dataset": {**asdict(self.dataset), "proportions": list(self.dataset.proportions)},
            "preprocess": self.preprocess.to_dict(),
            "zoo": [dict(z) for z in self.zoo],
            "train": self.train.to_dict(),
            "attack": self.attack.to_dict(),
            "dp_fraction": self.dp_fraction,
            "eval_split": self.eval_split,
            "mix_ratio": self.mix_ratio,
            "folds": self.folds,
            "split_seed": self.split_seed,
            "fgsm_eps": self.fgsm_eps,
            "pretrain_source": self.pretrain_source,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        _reject_unknown(cls, d, "experiment")
        kwargs = {}
        if "dataset" in d:
            ds = dict(d.pop("dataset"))
            _reject_unknown(DatasetSpec, ds, "dataset")
            if "proportions" in ds:
                ds["proportions"] = tuple(ds["proportions"])
            kwargs["dataset"] = DatasetSpec(**ds)
        if "preprocess" in d:
            pp = dict(d.pop("preprocess"))
            _reject_unknown(PreprocessConfig, pp, "preprocess")
            kwargs["preprocess"] = PreprocessConfig(**pp)
        if "train" in d:
            tr = dict(d.pop("train"))
            _reject_unknown(TrainConfig, tr, "train")
            kwargs["train"] = TrainConfig(**tr)
        if "attack" in d:
            at = dict(d.pop("attack"))
            _reject_unknown(AttackConfig, at, "attack")
            kwargs["attack"] = AttackConfig(**at)
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, seed=None, n=None, xi=None, p=None, target_fool=None,
                       dp_frac=None, mix_ratio=None, jobs=None, arch=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, dataset=replace(cfg.dataset, seed=seed), split_seed=seed,
                          train=replace(cfg.train, seed=seed),
                          attack=replace(cfg.attack, shuffle_seed=seed))
        if n is not None:
            cfg = replace(cfg, dataset=replace(cfg.dataset, n=n))
        attack_kw = {k: v for k, v in (("xi", xi), ("p", p), ("target_fooling", target_fool))
                     if v is not None}
        if attack_kw:
            cfg = replace(cfg, attack=replace(cfg.attack, **attack_kw))
        if dp_frac is not None:
            cfg = replace(cfg, dp_fraction=dp_frac)
        if mix_ratio is not None:
            cfg = replace(cfg, mix_ratio=mix_ratio)
        if jobs is not None:
            cfg = replace(cfg, jobs=jobs)
        if arch:
            cfg = replace(cfg, zoo=[{"arch": a, "seed": i} for i, a in enumerate(arch)])
        return cfg


def _reject_unknown(cls, d: dict, section: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")


# ---------------------------------------------------------------- data staging

def load_experiment_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, list]:
    """Synthesize or ingest, then preprocess. Returns the dataset and source paths."""
    spec = cfg.dataset
    if spec.source == "synthetic":
        raw = generate_synthetic_dataset(spec.n, spec.proportions, spec.image_size, spec.seed)
        images = preprocess_batch(raw.images, cfg.preprocess)
        return raw.with_images(images), [None] * len(raw)
    if spec.source == "csv":
        if not spec.csv or not spec.image_dir:
            raise ValueError("csv datasets need both 'csv' and 'image_dir'")
        raw = load_raw_images(spec.csv, spec.image_dir)
        images = np.stack([preprocess_batch([img], cfg.preprocess)[0] for _, _, img, _ in raw])
        ds = LabeledDataset(images, [r[1] for r in raw], [r[0] for r in raw])
        return ds, [str(r[3]) for r in raw]
    raise ValueError(f"unknown dataset source {spec.source!r}")


@dataclass
class Splits:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset


def make_splits(ds: LabeledDataset, folds: int = 4, seed: int = 0) -> Splits:
    """Fold 0 is the test split, fold 1 validation, the rest training."""
    fa = stratified_kfold(ds, folds, seed)
    train_idx = np.flatnonzero(fa.folds >= 2)
    return Splits(ds.subset(train_idx, "train"), ds.subset(fa.indices(1), "validation"),
                  ds.subset(fa.indices(0), "test"))


def save_array_dataset(ds: LabeledDataset, out_dir) -> tuple[Path, Path]:
    """Exact float32 dump (``.npy`` is byte-deterministic) plus an id_code,diagnosis CSV."""
    import io

    out_dir = Path(out_dir)
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(ds.images, dtype="<f4"))
    img_path = atomic_write_bytes(out_dir / "images.npy", buf.getvalue())
    lines = ["id_code,diagnosis"] + [f"{i},{g}" for i, g in zip(ds.ids, ds.grades)]
    csv_path = atomic_write_text(out_dir / "labels.csv", "\n".join(lines) + "\n")
    return img_path, csv_path


# ---------------------------------------------------------------- the run

class _Run:
    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.hash = cfg.hash()
        self.timing: dict[str, float] = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        log.info("stage %s", name)
        start = time.perf_counter()
        try:
            yield
        except Exception as exc:
            atomic_write_text(self.out / "FAILED", f"stage: {name}\nerror: {exc!r}\n")
            raise StageError(name, exc) from exc
        self.timing[name] = round(time.perf_counter() - start, 3)

    def write_json(self, rel: str, payload, inputs=()) -> Path:
        path = atomic_write_text(self.out / rel, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        write_meta(path, self.hash, inputs)
        return path

    def write_text(self, rel: str, text: str, inputs=()) -> Path:
        path = atomic_write_text(self.out / rel, text)
        write_meta(path, self.hash, inputs)
        return path


def _ttest(a, b) -> dict:
    try:
        return asdict(paired_ttest(a, b))
    except DegenerateVariance as exc:
        return {"error": str(exc)}


def _model_ids(zoo_spec) -> list[str]:
    archs = [z["arch"] for z in zoo_spec]
    return [a if archs.count(a) == 1 else f"{a}-s{z['seed']}" for a, z in zip(archs, zoo_spec)]


def repro_desk(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the whole pipeline and write the report bundle into ``out_dir``.

    Returns the report dict that is also written to ``report.json``.
    """
    run = _Run(cfg, out_dir)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    torch.set_num_threads(cfg.jobs)
    t0 = time.perf_counter()
    cfg_path = run.write_json("config.json", {"config": cfg.to_dict(), "config_hash": run.hash})

    with run.stage("data"):
        ds, _ = load_experiment_data(cfg)
        splits = make_splits(ds, cfg.folds, cfg.split_seed)
        dp, dr = split_perturb_robust(splits.train, cfg.dp_fraction, cfg.split_seed)
        data_files = save_array_dataset(ds, out / "data")
        for f in data_files:
            write_meta(f, run.hash, [cfg_path])
        eval_set = splits.test if cfg.eval_split == "test" else dr

    ids = _model_ids(cfg.zoo)
    shape = ds.image_shape
    zoo = ModelZoo()
    ckpt_clean = {}
    training_log = {}
    with run.stage("train"):
        source = None
        if cfg.pretrain_source:
            src = generate_synthetic_dataset(cfg.dataset.n, EYEPACS_PROPORTIONS, shape[1],
                                             seed=cfg.dataset.seed + 1, channels=shape[0],
                                             prefix="src")
            source = src.with_images(preprocess_batch(src.images, cfg.preprocess))
        for model_id, spec in zip(ids, cfg.zoo):
            model = build_model(spec["arch"], 5, shape, seed=spec["seed"])
            if source is not None:
                pretrain_source_task(model, cfg.train, source=source)
            head, full = two_stage_finetune(model, splits.train, cfg.train, splits.validation)
            training_log[model_id] = {
                "head_epochs": len(head.history), "full_epochs": len(full.history),
                "history": [asdict(r) for r in head.history + full.history],
            }
            zoo.add(model_id, model)
            ckpt_clean[model_id] = save_checkpoint(model, out / "models" / f"{model_id}.clean.uapm")
            write_meta(ckpt_clean[model_id], run.hash, data_files)

    with run.stage("clean-eval"):
        clean = {m.model_id: evaluate_model(m.model, eval_set) for m in zoo}
        clean_ens = evaluate_model(zoo, eval_set)

    uap_files = {}
    uap_table = {}
    with run.stage("uap"):
        for member in zoo:
            try:
                pv = generate_uap(member.model, dp, cfg.attack, source_model=member.model_id)
                reached = True
            except TargetNotReached as exc:
                log.warning("%s: %s", member.model_id, exc)
                pv, reached = exc.perturbation, False
            member.perturbation = pv
            uap_files[member.model_id] = save_perturbation(
                pv, out / "perturbations" / f"{member.model_id}.uapv")
            write_meta(uap_files[member.model_id], run.hash, [ckpt_clean[member.model_id], *data_files])
            uap_table[member.model_id] = {
                "fooling_ratio": pv.final_fooling_ratio, "passes": pv.passes,
                "history": pv.history, "target_reached": reached,
            }

    with run.stage("transfer-before"):
        before = transfer_matrix(zoo, eval_set, cfg.jobs, "Performance of models before "
                                 "adversarial fine-tuning", cfg.eval_split, cfg.to_dict())
        fgsm_before = _fgsm_eval(zoo, eval_set, cfg)

    after_zoo = ModelZoo()
    ckpt_after = {}
    with run.stage("advft"):
        for member in zoo:
            model = member.model.copy()
            res = adversarial_finetune(model, splits.train, member.perturbation, cfg.train,
                                       cfg.mix_ratio, splits.validation, member.model_id)
            training_log[member.model_id]["advft_epochs"] = len(res.history)
            after_zoo.add(member.model_id, model, member.perturbation)
            ckpt_after[member.model_id] = save_checkpoint(
                model, out / "models" / f"{member.model_id}.advft.uapm")
            write_meta(ckpt_after[member.model_id], run.hash,
                       [ckpt_clean[member.model_id], uap_files[member.model_id], *data_files])

    with run.stage("transfer-after"):
        after = transfer_matrix(after_zoo, eval_set, cfg.jobs, "Performance of models after "
                                "adversarial fine-tuning", cfg.eval_split, cfg.to_dict())
        clean_after = {m.model_id: evaluate_model(m.model, eval_set) for m in after_zoo}
        clean_after_ens = evaluate_model(after_zoo, eval_set)
        fgsm_after = _fgsm_eval(after_zoo, eval_set, cfg)

    with run.stage("stats"):
        clean_k = [clean[i]["quadratic_kappa"] for i in ids]
        before_diag = before.diagonal()
        after_diag = after.diagonal()
        stats = {
            "before_vs_clean": _ttest(clean_k, before_diag),
            "after_vs_before": _ttest(after_diag, before_diag),
            "after_vs_clean": _ttest(after_diag, clean_k),
            "offdiag_after_vs_before": _ttest(after.off_diagonal(), before.off_diagonal())
            if len(ids) > 1 else {"error": "single-model zoo has no off-diagonal cells"},
        }

    with run.stage("report"):
        inputs = [*ckpt_clean.values(), *ckpt_after.values(), *uap_files.values(), *data_files]
        report = {
            "schema": analysis.REPORT_SCHEMA,
            "kind": "repro_desk",
            "config_hash": run.hash,
            "dataset_sha256": ds.sha256(),
            "eval_split": cfg.eval_split,
            "split_sizes": {"train": len(splits.train), "validation": len(splits.validation),
                            "test": len(splits.test), "perturb_split": len(dp),
                            "robust_split": len(dr)},
            "models": ids,
            "clean": {i: _metric_row(clean[i]) for i in ids} | {"ensemble": _metric_row(clean_ens)},
            "clean_after": {i: _metric_row(clean_after[i]) for i in ids}
            | {"ensemble": _metric_row(clean_after_ens)},
            "uap": uap_table,
            "transfer_before": _strip_created(before),
            "transfer_after": _strip_created(after),
            "fgsm": {"eps": _fgsm_eps(cfg), "before": fgsm_before, "after": fgsm_after},
            "stats": stats,
            "summary": {
                "clean_kappa": dict(zip(ids, clean_k)),
                "self_attack_before": dict(zip(ids, before_diag)),
                "self_attack_after": dict(zip(ids, after_diag)),
                "offdiag_mean_before": float(np.mean(before.off_diagonal())) if len(ids) > 1 else None,
                "offdiag_mean_after": float(np.mean(after.off_diagonal())) if len(ids) > 1 else None,
            },
            "training": training_log,
        }
        report_path = run.write_json("report.json", report, inputs)
        run.write_text("tables.md", _render_tables(report, before, after), [report_path])
        # wall-clock stamps would break bundle determinism; timing.json has the times
        for name, matrix in (("transfer_before", before), ("transfer_after", after)):
            run.write_json(f"{name}.json",
                           json.loads(render_report(replace(matrix, created=""), "json")), inputs)
    run.timing["total"] = round(time.perf_counter() - t0, 3)
    atomic_write_text(out / "timing.json", json.dumps(run.timing, indent=2, sort_keys=True) + "\n")
    return report


def _fgsm_eps(cfg: ExperimentConfig) -> float:
    return cfg.fgsm_eps if cfg.fgsm_eps is not None else cfg.attack.xi


def _fgsm_eval(zoo: ModelZoo, dataset: LabeledDataset, cfg: ExperimentConfig) -> dict:
    """White-box FGSM against each member: a perturbation family never seen in training."""
    eps = _fgsm_eps(cfg)
    return {m.model_id: evaluate_model(m.model, fgsm_dataset(m.model, dataset, eps))["quadratic_kappa"]
            for m in zoo}


def _metric_row(metrics: dict) -> dict:
    return {"quadratic_kappa": metrics["quadratic_kappa"], "accuracy": metrics["accuracy"],
            "agreement": agreement_level(max(-1.0, min(1.0, metrics["quadratic_kappa"]))),
            "confusion_matrix": metrics["confusion_matrix"]}


def _strip_created(report) -> dict:
    d = report.to_dict()
    d.pop("created")
    d.pop("configs")
    return d


def _render_tables(report: dict, before, after) -> str:
    ids = report["models"]
    lines = ["## Fooling ratio per perturbation vector\n",
             "| Model | Fooling ratio | Passes | Target reached |", "|---|---|---|---|"]
    for i in ids:
        u = report["uap"][i]
        lines.append(f"| {i} | {u['fooling_ratio']:.4f} | {u['passes']} | {u['target_reached']} |")
    lines += ["", "## Clean test performance\n", "| Model | Quadratic Cohen Kappa | Level of Agreement |",
              "|---|---|---|"]
    for i in ids + ["ensemble"]:
        row = report["clean"][i]
        lines.append(f"| {i} | {row['quadratic_kappa']:.4f} | {row['agreement']} |")
    lines.append("")
    text = "\n".join(lines) + "\n"
    text += render_report(before, "md") + "\n" + render_report(after, "md") + "\n"
    lines = ["## Paired t-tests\n", "| Comparison | t | p-value | mean difference |", "|---|---|---|---|"]
    for name, res in report["stats"].items():
        if "error" in res:
            lines.append(f"| {name} | - | - | {res['error']} |")
        else:
            lines.append(f"| {name} | {res['t_statistic']:.4f} | {res['p_value']:.4e} | "
                         f"{res['mean_diff']:.4f} |")
    lines += ["", f"## FGSM (eps = {report['fgsm']['eps']})\n", "| Model | before | after |",
              "|---|---|---|"]
    for i in ids:
        lines.append(f"| {i} | {report['fgsm']['before'][i]:.4f} | {report['fgsm']['after'][i]:.4f} |")
    return text + "\n".join(lines) + "\n"
