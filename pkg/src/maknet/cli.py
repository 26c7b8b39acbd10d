"""Command-line entry point.

Subcommands: gen-data, train-teacher, pseudo-label, train-student,
run-noisy-student, evaluate, attribute, perturb, params. Every run writes a
provenance record (config digest, seed, checkpoint ids) and a config.lock
next to its outputs; any run is reproducible bit-exactly from
(config file, seed). `MAKNET_THREADS` caps parallel data loading.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .arch import build_maknet, build_plain_baseline, param_report
from .attribution import (
    integrated_gradients_for_model,
    perturb_black_patch,
    perturb_delete_ig_mask,
    perturb_replace_neighbors,
    prediction_delta_report,
    save_attribution,
)
from .checkpoint import (
    checkpoint_id,
    load_checkpoint,
    model_tensors,
    save_checkpoint,
)
from .config import RunConfig, load_config
from .data import atomic_write_text, generate_synthetic_dataset, load_samples
from .semisup import (
    batch_scores,
    build_model_from_checkpoint,
    evaluate_samples,
    load_semisup_data,
    noisy_student_iterate,
    pseudo_label_pool,
    read_pseudo_labels,
    train_student,
    train_teacher,
    write_pseudo_labels,
)

__all__ = ["main"]


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.values["run"]["seed"] = args.seed
    return cfg


def _out_dir(args, default: str = "run") -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out: Path, cfg: RunConfig, extra: dict[str, str]) -> None:
    lines = [f"config_digest = {cfg.digest()}", f"seed = {cfg.seed}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    atomic_write_text(out / "provenance.txt", "\n".join(lines) + "\n")
    atomic_write_text(out / "config.lock", cfg.serialize())


def _split_samples(cfg: RunConfig, split: str, manifest: str | None):
    root = cfg.data_root()
    num_labels = cfg["model"]["num_labels"]
    if manifest:
        return load_samples(root, manifest, num_labels, "labeled")
    path = root / f"{split}.tsv"
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found; run gen-data first")
    return load_samples(root, path, num_labels, "labeled")


# ----------------------------------------------------------------------
# subcommand implementations


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    root = cfg.data_root()
    root.mkdir(parents=True, exist_ok=True)
    paths = generate_synthetic_dataset(root, cfg.synthetic_spec(), cfg.seed)
    _write_provenance(root, cfg, {"dataset_root": "."})
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")
    return 0


def _cmd_train_teacher(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    data = load_semisup_data(cfg)
    resume = load_checkpoint(args.resume, cfg.model_digest()) if args.resume else None
    model, trainer = train_teacher(cfg, data, max_steps=args.max_steps, resume=resume)
    ckpt = out / "checkpoint-0.maknet"
    save_checkpoint(ckpt, cfg.section_text("model"), model_tensors(model),
                    trainer.train_state())
    _write_provenance(out, cfg, {"checkpoint.teacher": checkpoint_id(ckpt)})
    print(f"teacher checkpoint: {ckpt} ({trainer.step} steps)")
    return 0


def _cmd_pseudo_label(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    data = load_semisup_data(cfg)
    model = build_model_from_checkpoint(args.checkpoint, cfg.model_digest())
    ckpt = checkpoint_id(args.checkpoint)
    records = pseudo_label_pool(
        model, data.unlabeled, data.ontology, cfg["semisup"]["eval_batch"],
        args.iteration, ckpt,
    )
    path = out / "pseudo-labels.txt"
    write_pseudo_labels(path, records)
    kept = sum(1 for r in records if r.retained)
    _write_provenance(out, cfg, {"checkpoint.labeler": ckpt})
    print(f"pseudo labels: {path} ({kept}/{len(records)} retained)")
    return 0


def _cmd_train_student(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    data = load_semisup_data(cfg)
    records = read_pseudo_labels(args.pseudo, iteration=args.iteration)
    model, trainer = train_student(cfg, data, records, args.iteration)
    ckpt = out / f"checkpoint-{args.iteration}.maknet"
    save_checkpoint(ckpt, cfg.section_text("model"), model_tensors(model),
                    trainer.train_state())
    _write_provenance(out, cfg, {f"checkpoint.student{args.iteration}": checkpoint_id(ckpt)})
    print(f"student checkpoint: {ckpt} ({trainer.step} steps)")
    return 0


def _cmd_run_noisy_student(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    reports = noisy_student_iterate(cfg, out, args.iterations)
    _write_provenance(
        out, cfg, {f"checkpoint.{r.iteration}": r.checkpoint for r in reports}
    )
    print((out / "summary.txt").read_text(), end="")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    model = build_model_from_checkpoint(args.checkpoint, cfg.model_digest())
    samples = _split_samples(cfg, args.split, args.manifest)
    result = evaluate_samples(model, samples, cfg["semisup"]["eval_batch"])
    table = result.table(title=f"{args.split} ({len(samples)} samples)")
    print(table, end="")
    if args.out:
        out = _out_dir(args)
        atomic_write_text(out / f"metrics-{args.split}.txt", table)
        atomic_write_text(out / f"metrics-{args.split}.csv", result.csv_lines(args.split))
        _write_provenance(out, cfg, {"checkpoint.eval": checkpoint_id(args.checkpoint)})
    return 0


def _pick_sample(cfg: RunConfig, args):
    samples = _split_samples(cfg, args.split, args.manifest)
    if not 0 <= args.index < len(samples):
        raise IndexError(f"--index {args.index} out of range for {len(samples)} samples")
    return samples[args.index]


def _target_label(model, image: np.ndarray, requested: int | None) -> int:
    if requested is not None:
        return requested
    from .tensor import Tensor, no_grad

    model.eval()
    with no_grad():
        scores = model.scores(
            Tensor(image[None].astype(model.config.np_dtype()))
        ).data[0]
    return int(np.argmax(scores))


def _cmd_attribute(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    model = build_model_from_checkpoint(args.checkpoint, cfg.model_digest())
    sample = _pick_sample(cfg, args)
    image = sample.image.astype(np.float64) / 255.0
    target = _target_label(model, image, args.target_label)
    steps = args.steps if args.steps else cfg["attribution"]["steps"]
    amap = integrated_gradients_for_model(model, image, target, steps=steps)
    raw, pgm = save_attribution(out / f"attribution-{sample.stem.replace('/', '_')}", amap)
    record = (
        f"sample = {sample.stem}\ntarget_label = {target}\nsteps = {steps}\n"
        f"output = {amap.output_value:.6f}\nbaseline_output = {amap.baseline_value:.6f}\n"
        f"completeness_residual = {amap.completeness_residual:.6e}\n"
    )
    atomic_write_text(out / "attribution.txt", record)
    _write_provenance(out, cfg, {"checkpoint.attribute": checkpoint_id(args.checkpoint)})
    print(record, end="")
    print(f"saved: {raw} {pgm}")
    return 0


def _cmd_perturb(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    model = build_model_from_checkpoint(args.checkpoint, cfg.model_digest())
    sample = _pick_sample(cfg, args)
    image = sample.image.astype(np.float64) / 255.0
    target = _target_label(model, image, args.target_label)
    h, w = image.shape[1:]
    if args.rect:
        r0, c0, rh, rw = (int(v) for v in args.rect.split(","))
    else:
        r0, c0, rh, rw = h // 4, w // 4, h // 2, w // 2

    if args.strategy == "black-patch":
        perturbed = perturb_black_patch(image, [(r0, c0, rh, rw)])
    elif args.strategy == "replace-neighbors":
        mask = np.zeros((h, w), dtype=bool)
        mask[r0 : r0 + rh, c0 : c0 + rw] = True
        perturbed = perturb_replace_neighbors(image, mask)
    else:  # ig-mask-delete
        fraction = args.fraction if args.fraction else cfg["attribution"]["mask_fraction"]
        steps = args.steps if args.steps else cfg["attribution"]["steps"]
        amap = integrated_gradients_for_model(model, image, target, steps=steps)
        perturbed = perturb_delete_ig_mask(image, amap.attributions, fraction)

    report = prediction_delta_report(model, image, perturbed, k=5,
                                     strategy=args.strategy)
    atomic_write_text(out / "perturbation.txt", report.to_text())
    _write_provenance(out, cfg, {"checkpoint.perturb": checkpoint_id(args.checkpoint)})
    print(report.to_text(), end="")
    return 0


def _cmd_params(args) -> int:
    cfg = _load_cfg(args)
    model_cfg = cfg.model_config()
    builder = build_plain_baseline if args.plain else build_maknet
    report = param_report(builder(model_cfg, seed=cfg.seed))
    print(report, end="")
    if args.out:
        out = _out_dir(args)
        atomic_write_text(out / "params.txt", report)
        _write_provenance(out, cfg, {})
    return 0


# ----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maknet",
        description="Mixed-asymmetric-kernel CNN: training, semi-supervised "
        "iteration, evaluation, and attribution tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=True):
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if out_default:
            p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p, out_default=False)

    p = sub.add_parser("train-teacher", help="train the teacher on labeled data")
    common(p)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("pseudo-label", help="label the unlabeled pool")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iteration", type=int, default=1)

    p = sub.add_parser("train-student", help="train a student on labeled + pseudo")
    common(p)
    p.add_argument("--pseudo", required=True, help="pseudo-label file")
    p.add_argument("--iteration", type=int, default=1)

    p = sub.add_parser("run-noisy-student", help="full teacher + student chain")
    common(p)
    p.add_argument("--iterations", type=int, default=5)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--manifest", default=None, help="explicit manifest path")

    p = sub.add_parser("attribute", help="integrated-gradients attribution")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--manifest", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target-label", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("perturb", help="perturb a sample and report deltas")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--manifest", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target-label", type=int, default=None)
    p.add_argument(
        "--strategy",
        choices=["replace-neighbors", "black-patch", "ig-mask-delete"],
        default="black-patch",
    )
    p.add_argument("--rect", default=None, help="r0,c0,h,w region")
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("params", help="per-layer parameter table")
    common(p)
    p.add_argument("--plain", action="store_true", help="plain-conv twin")
    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "pseudo-label": _cmd_pseudo_label,
    "train-student": _cmd_train_student,
    "run-noisy-student": _cmd_run_noisy_student,
    "evaluate": _cmd_evaluate,
    "attribute": _cmd_attribute,
    "perturb": _cmd_perturb,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # one machine-parseable line, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
