"""Command line entry point: one subcommand per pipeline stage plus repro-desk and verify."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .analysis import paired_ttest, render_report
from .attacks import (
    AttackConfig,
    fgsm_dataset,
    generate_uap,
    load_perturbation,
    perturb_dataset,
    save_perturbation,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    LabeledDataset,
    generate_synthetic_dataset,
    load_dataset_dir,
    load_raw_images,
    save_dataset_dir,
    split_perturb_robust,
)
from .errors import TargetNotReached, UAPLabError
from .models import build_model
from .pipeline import ExperimentConfig, StageError, make_splits, repro_desk
from .preprocess import preprocess_image
from .provenance import atomic_write_text, config_hash, verify_tree, write_meta
from .robustness import ModelZoo, adversarial_finetune, evaluate_model, transfer_matrix
from .training import two_stage_finetune

log = logging.getLogger("uaplab")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return cfg


def _stage_hash(command: str, cfg: ExperimentConfig, **extra) -> str:
    return config_hash({"command": command, "config": cfg.to_dict(), "args": extra})


def _attack_config(cfg: ExperimentConfig, args) -> AttackConfig:
    kw = {}
    if args.xi is not None:
        kw["xi"] = args.xi
    if args.p is not None:
        kw["p"] = args.p
    if args.target_fool is not None:
        kw["target_fooling"] = args.target_fool
    if args.seed is not None:
        kw["shuffle_seed"] = args.seed
    return replace(cfg.attack, **kw)


def _splits(cfg: ExperimentConfig, data_dir):
    ds = load_dataset_dir(data_dir)
    return ds, make_splits(ds, cfg.folds, cfg.split_seed)


def _data_inputs(data_dir) -> list[Path]:
    return [Path(data_dir) / "labels.csv"]


def _emit(payload, fmt: str | None, out: Path | None = None, name: str = "report") -> None:
    text = render_report(payload, fmt or "json")
    if out is not None:
        ext = "md" if fmt == "md" else "json"
        atomic_write_text(Path(out) / f"{name}.{ext}", text)
    sys.stdout.write(text)


def _model_stem(path) -> str:
    return Path(path).name.split(".")[0]


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = cfg.dataset
    n = args.n if args.n is not None else spec.n
    seed = args.seed if args.seed is not None else spec.seed
    ds = generate_synthetic_dataset(n, spec.proportions, spec.image_size, seed)
    out = Path(args.out)
    save_dataset_dir(ds, out)
    h = _stage_hash("synth", cfg, n=n, seed=seed)
    write_meta(out / "manifest.json", h)
    write_meta(out / "labels.csv", h)
    log.info("wrote %d synthetic images to %s", n, out)
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    src = Path(args.dataset)
    raw = load_raw_images(src / "labels.csv", src / "images")
    images = np.stack([preprocess_image(img, cfg.preprocess) for _, _, img, _ in raw])
    ds = LabeledDataset(images, [r[1] for r in raw], [r[0] for r in raw])
    out = Path(args.out)
    pp_hash = cfg.preprocess.hash()
    save_dataset_dir(ds, out, pp_hash, [r[3] for r in raw])
    h = _stage_hash("preprocess", cfg)
    write_meta(out / "manifest.json", h, _data_inputs(src))
    write_meta(out / "labels.csv", h, _data_inputs(src))
    log.info("preprocessed %d images into %s", len(ds), out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    arch = args.arch or cfg.zoo[0]["arch"]
    seed = args.seed if args.seed is not None else cfg.zoo[0].get("seed", 0)
    ds, splits = _splits(cfg, args.dataset)
    train_cfg = replace(cfg.train, seed=seed)
    model = build_model(arch, 5, ds.image_shape, seed=seed)
    head, full = two_stage_finetune(model, splits.train, train_cfg, splits.validation)
    out = Path(args.out)
    h = _stage_hash("train", cfg, arch=arch, seed=seed)
    ckpt = save_checkpoint(model, out / f"{arch}.uapm")
    write_meta(ckpt, h, _data_inputs(args.dataset))
    metrics = {"kind": "train", "arch": arch, "seed": seed,
               "test": evaluate_model(model, splits.test),
               "history": [asdict(r) for r in head.history + full.history]}
    _write_json(out / f"{arch}.train.json", metrics, h, [ckpt])
    log.info("%s: test kappa %.4f", arch, metrics["test"]["quadratic_kappa"])
    return 0


def cmd_uap(args) -> int:
    cfg = _config(args)
    attack = _attack_config(cfg, args)
    dp_frac = args.dp_frac if args.dp_frac is not None else cfg.dp_fraction
    _, splits = _splits(cfg, args.dataset)
    dp, _ = split_perturb_robust(splits.train, dp_frac, cfg.split_seed)
    model = load_checkpoint(args.model)
    out = Path(args.out)
    status = 0
    try:
        pv = generate_uap(model, dp, attack, source_model=model.arch_id)
    except TargetNotReached as exc:
        log.error("%s", exc)
        pv, status = exc.perturbation, 1
    path = save_perturbation(pv, out / f"{_model_stem(args.model)}.uapv")
    write_meta(path, _stage_hash("uap", cfg, attack=attack.to_dict(), dp_frac=dp_frac),
               [args.model, *_data_inputs(args.dataset)])
    print(json.dumps({"fooling_ratio": pv.final_fooling_ratio, "passes": pv.passes,
                      "history": pv.history, "path": str(path)}, indent=2))
    return status


def cmd_attack_eval(args) -> int:
    cfg = _config(args)
    _, splits = _splits(cfg, args.dataset)
    test = splits.test
    model = load_checkpoint(args.model)
    eps = args.xi if args.xi is not None else cfg.attack.xi
    result = {"kind": "attack_eval", "model": str(args.model),
              "clean": evaluate_model(model, test)["quadratic_kappa"],
              "fgsm_eps": eps,
              "fgsm": evaluate_model(model, fgsm_dataset(model, test, eps))["quadratic_kappa"]}
    if args.uap:
        pv = load_perturbation(args.uap)
        result["uap"] = evaluate_model(model, perturb_dataset(test, pv))["quadratic_kappa"]
        result["uap_source"] = pv.source_model
    _emit(result, args.format, args.out, "attack_eval")
    return 0


def cmd_advft(args) -> int:
    cfg = _config(args)
    _, splits = _splits(cfg, args.dataset)
    model = load_checkpoint(args.model)
    pv = load_perturbation(args.uap)
    mix = args.mix_ratio if args.mix_ratio is not None else cfg.mix_ratio
    train_cfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    res = adversarial_finetune(model, splits.train, pv, train_cfg, mix, splits.validation)
    out = Path(args.out)
    h = _stage_hash("advft", cfg, mix_ratio=mix, seed=train_cfg.seed)
    ckpt = save_checkpoint(model, out / f"{_model_stem(args.model)}.advft.uapm")
    write_meta(ckpt, h, [args.model, args.uap, *_data_inputs(args.dataset)])
    log.info("advft finished after %d epochs (best %d)", len(res.history), res.best_epoch)
    return 0


def cmd_transfer(args) -> int:
    if len(args.model) != len(args.uap):
        raise UsageError("transfer needs one --uap per --model, in the same order")
    cfg = _config(args)
    _, splits = _splits(cfg, args.dataset)
    zoo = ModelZoo()
    for mpath, upath in zip(args.model, args.uap):
        model = load_checkpoint(mpath)
        model_id = _model_stem(mpath)
        if model_id in zoo.ids():
            model_id = f"{model_id}-{len(zoo)}"
        zoo.add(model_id, model, load_perturbation(upath))
    jobs = args.jobs or cfg.jobs
    report = transfer_matrix(zoo, splits.test, jobs, "Transfer attack matrix", "test",
                             cfg.to_dict())
    if args.out:
        path = Path(args.out) / ("transfer.md" if args.format == "md" else "transfer.json")
        atomic_write_text(path, render_report(report, args.format or "json"))
        write_meta(path, _stage_hash("transfer", cfg), [*args.model, *args.uap])
    sys.stdout.write(render_report(report, args.format or "json"))
    return 0


def _read_values(path) -> tuple[list, list | None]:
    """Values (and optional keys) from a JSON list, ``{"values": [...]}``,
    a name -> value mapping, or a transfer-matrix report (its diagonal)."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return [float(v) for v in data], None
    if isinstance(data, dict):
        if "values" in data:
            return [float(v) for v in data["values"]], None
        if "kappa" in data and "rows" in data:
            rows, cols = data["rows"], data["cols"]
            return [float(data["kappa"][i][cols.index(r)]) for i, r in enumerate(rows)], list(rows)
        return [float(v) for v in data.values()], list(data)
    raise UsageError(f"{path}: expected a JSON list or object of numbers")


def cmd_stats(args) -> int:
    a, keys_a = _read_values(args.clean)
    b, keys_b = _read_values(args.attacked)
    if keys_a and keys_b and set(keys_a) == set(keys_b):
        b = [b[keys_b.index(k)] for k in keys_a]
    result = paired_ttest(a, b)
    if args.format:
        sys.stdout.write(render_report(result, args.format))
    else:
        print(f"t = {result.t_statistic:.6g}  dof = {result.dof}  "
              f"mean diff = {result.mean_diff:.6g}  p = {result.p_value:.4e}")
    return 0


def cmd_repro_desk(args) -> int:
    cfg = _config(args).with_overrides(
        seed=args.seed, n=args.n, xi=args.xi, p=args.p, target_fool=args.target_fool,
        dp_frac=args.dp_frac, mix_ratio=args.mix_ratio, jobs=args.jobs, arch=args.arch)
    out = Path(args.out)
    report = repro_desk(cfg, out)
    if args.format == "md":
        sys.stdout.write((out / "tables.md").read_text())
    else:
        sys.stdout.write(json.dumps(report["summary"] | {"stats": report["stats"]},
                                    indent=2, sort_keys=True) + "\n")
    return 0


def cmd_verify(args) -> int:
    problems = verify_tree(args.directory)
    for p in problems:
        print(p)
    if problems:
        return 1
    print(f"{args.directory}: provenance chain intact")
    return 0


def _write_json(path: Path, payload, cfg_hash: str, inputs=()) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_meta(path, cfg_hash, inputs)


# ---------------------------------------------------------------- parser

def _norm(value: str) -> str:
    if value not in ("inf", "2"):
        raise argparse.ArgumentTypeError("--p must be 'inf' or '2'")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uaplab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            p.add_argument("--config", metavar="PATH", help="experiment config JSON")
        p.set_defaults(func=func, parser=p)
        return p

    def attack_flags(p):
        p.add_argument("--xi", type=float, help="perturbation budget")
        p.add_argument("--p", type=_norm, help="norm of the budget ball: inf or 2")
        p.add_argument("--target-fool", type=float, help="target fooling ratio")
        p.add_argument("--dp-frac", type=float, help="share of the training split used as D_p")

    fmt = dict(choices=("json", "md"), help="output format")

    p = add("synth", cmd_synth, "generate a synthetic graded fundus dataset")
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("preprocess", cmd_preprocess, "trim, resize, crop and smooth-normalize a dataset")
    p.add_argument("dataset", help="directory with labels.csv and images/")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("train", cmd_train, "two-stage training of one architecture")
    p.add_argument("dataset")
    p.add_argument("--arch", metavar="ID")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("uap", cmd_uap, "generate a universal perturbation for one model")
    p.add_argument("dataset")
    p.add_argument("--model", required=True, metavar="PATH")
    attack_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("attack-eval", cmd_attack_eval, "kappa under clean, UAP and FGSM inputs")
    p.add_argument("dataset")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--uap", metavar="PATH")
    p.add_argument("--xi", type=float, help="FGSM step size (defaults to the attack budget)")
    p.add_argument("--format", **fmt)
    p.add_argument("--out", metavar="DIR")

    p = add("advft", cmd_advft, "adversarially fine-tune a model on its own perturbation")
    p.add_argument("dataset")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--uap", required=True, metavar="PATH")
    p.add_argument("--mix-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("transfer", cmd_transfer, "transfer-attack matrix over a set of models")
    p.add_argument("dataset")
    p.add_argument("--model", action="append", required=True, metavar="PATH")
    p.add_argument("--uap", action="append", required=True, metavar="PATH")
    p.add_argument("--jobs", type=int)
    p.add_argument("--format", **fmt)
    p.add_argument("--out", metavar="DIR")

    p = add("stats", cmd_stats, "paired two-tailed t-test between two score lists", config=False)
    p.add_argument("--clean", required=True, metavar="PATH")
    p.add_argument("--attacked", required=True, metavar="PATH")
    p.add_argument("--format", **fmt)

    p = add("repro-desk", cmd_repro_desk, "run the whole pipeline at desk scale")
    p.add_argument("--out", default="uaplab-desk", metavar="DIR")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--arch", action="append", metavar="ID", help="zoo member (repeatable)")
    attack_flags(p)
    p.add_argument("--mix-ratio", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--format", **fmt)

    p = add("verify", cmd_verify, "re-check the provenance chain of an output tree", config=False)
    p.add_argument("directory")
    return parser


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("UAPLAB_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        args.parser.print_usage(sys.stderr)
        print(f"{args.parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        log.error("%s", exc)
        return 1
    except (UAPLabError, OSError, ValueError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
