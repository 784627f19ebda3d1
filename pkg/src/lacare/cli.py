"""Command-line entry point: ``lacare <command> [options]``.

Commands::

    phantom gen      write a synthetic cohort and its manifest
    preprocess       spacing correction, resampling, normalization
    augment preview  write one augmented training crop
    train            train one cascade (optionally one fold)
    predict          segment cases with one model or an ensemble
    postprocess      drop components disconnected from the main blob
    evaluate         per-case metrics.csv plus mean/std rows
    pipeline         all of the above, end to end

Exit status is 0 on success, 1 for invalid input or usage, 2 when a run
fails. Every command writes ``run.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; 1 gives the bit-exact sequential mode (default)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lacare", description="Two-stage cascade segmentation of atrium and scar.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic data")
    phs = ph.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = phs.add_parser("gen", help="generate a phantom cohort")
    _common(g)
    g.add_argument("--n", type=int, help="number of phantoms (config phantom_n)")
    g.add_argument("--n-test", type=int, help="held-out cases (config phantom_n_test)")
    g.add_argument("--domain-shift", choices=("none", "intensity", "resolution"))
    g.add_argument("--erase-fraction", type=float)
    g.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="prepare a cohort for the network")
    _common(p)
    p.add_argument("--data", required=True, help="directory holding manifest.json")
    p.add_argument("--out", required=True)

    a = sub.add_parser("augment", help="augmentation tools")
    acts = a.add_subparsers(dest="action", required=True, parser_class=_Parser)
    pv = acts.add_parser("preview", help="write one augmented crop")
    _common(pv)
    pv.add_argument("--data", required=True, help="prepared directory")
    pv.add_argument("--case", required=True)
    pv.add_argument("--iteration", type=int, default=0, help="stream counter to draw from")
    pv.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one cascade")
    _common(t)
    t.add_argument("--data", required=True, help="prepared directory")
    t.add_argument("--out", required=True)
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--folds", type=int, default=1)
    t.add_argument("--resume", help="checkpoint to continue from")

    pr = sub.add_parser("predict", help="segment prepared cases")
    _common(pr)
    pr.add_argument("--data", required=True, help="prepared directory")
    pr.add_argument("--model", action="append", required=True, help="checkpoint; repeat for an ensemble")
    pr.add_argument("--split", default="test", help="which split to segment, or 'all'")
    pr.add_argument("--out", required=True)

    pp = sub.add_parser("postprocess", help="filter predicted label maps")
    _common(pp)
    pp.add_argument("--pred", required=True)
    pp.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    _common(e)
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="directory holding manifest.json")
    e.add_argument("--task", choices=("1", "2", "both"), default="both")
    e.add_argument("--out", default=".", help="directory for metrics.csv (default: cwd)")

    pl = sub.add_parser("pipeline", help="generate, train, predict, evaluate")
    _common(pl)
    pl.add_argument("--out", required=True)
    return ap


# -- helpers ---------------------------------------------------------------------

def _set_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _need_dir(path: str, what: str) -> None:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} directory not found: {path}")


def _distinct(out: str, *inputs: str) -> None:
    o = os.path.abspath(out)
    for i in inputs:
        if os.path.abspath(i) == o:
            raise UsageError(f"output directory {out} must differ from input {i}")


def _versions() -> dict:
    import numpy
    import scipy

    from lacare import __version__
    from lacare.nn import get_backend
    return {"lacare": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "conv_backend": get_backend()}


def _write_run(out: str, args, argv, rc, t0: float, extra: dict | None = None) -> None:
    os.makedirs(out, exist_ok=True)
    rec = {"argv": list(argv), "command": args.command, "action": getattr(args, "action", None),
           "seed": rc["seed"], "config": rc.snapshot(), "versions": _versions(),
           "wall_time_s": round(time.perf_counter() - t0, 3)}
    rec.update(extra or {})
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(rec, f, indent=2, sort_keys=True)


# -- commands --------------------------------------------------------------------

def cmd_phantom_gen(args, rc) -> dict:
    from lacare.phantom import generate_cohort
    n = args.n if args.n is not None else rc["phantom_n"]
    n_test = args.n_test if args.n_test is not None else min(rc["phantom_n_test"], n)
    shift = args.domain_shift or rc["phantom_domain_shift"]
    frac = args.erase_fraction if args.erase_fraction is not None else rc["phantom_erase_fraction"]
    from lacare.config import phantom_config
    m = generate_cohort(rc["seed"], n, args.out, shift, frac, n_test, phantom_config(rc))
    return {"cases": len(m["cases"])}


def cmd_preprocess(args, rc) -> dict:
    from lacare.dataset import prepare_manifest, save_prepared
    from lacare.phantom import load_manifest
    from lacare.preprocess import write_spacing_report
    _need_dir(args.data, "data")
    _distinct(args.out, args.data)
    manifest, base = load_manifest(args.data)
    cases, stats, before, after = prepare_manifest(manifest, base,
                                                   target_spacing=rc["target_spacing"])
    splits = {c["id"]: c["split"] for c in manifest["cases"]}
    save_prepared(args.out, cases, stats, splits)
    write_spacing_report(os.path.join(args.out, "spacing_report.csv"),
                         [c.case_id for c in cases], before, after)
    return {"cases": len(cases), "flagged": stats.flagged}


def cmd_augment_preview(args, rc) -> dict:
    from lacare.augment import augment_training_crop
    from lacare.config import augment_config
    from lacare.dataset import load_prepared
    from lacare.preprocess import CropSpec
    from lacare.rng import stream
    from lacare.volume_io import LabelVolume, Volume, VolumeHeader, write_labels, write_volume
    _need_dir(args.data, "prepared")
    _distinct(args.out, args.data)
    cases = load_prepared(args.data, ids=[args.case])
    if not cases:
        raise UsageError(f"case {args.case!r} not in {args.data}")
    c = cases[0]
    origin = CropSpec(c.centroid, rc["crop_size"]).origin()
    rng = stream(rc["seed"], "augment", args.iteration, 0)
    img, lab = augment_training_crop(c.image, c.labels, origin, rc["crop_size"], rng,
                                     augment_config(rc))
    os.makedirs(args.out, exist_ok=True)
    hdr = VolumeHeader(img.shape, c.spacing)
    write_volume(Volume(hdr, img), os.path.join(args.out, f"{c.case_id}_aug_image.nii"))
    write_labels(LabelVolume(hdr.replace(datatype="uint8"), lab),
                 os.path.join(args.out, f"{c.case_id}_aug_label.nii"))
    return {"case": c.case_id}


def train_member(prep_dir: str, out: str, rc_values: dict, seed: int, fold: int, folds: int,
                 resume: str | None = None) -> str:
    """Train one cascade from a prepared set; returns the final checkpoint path."""
    from lacare.cascade.train import load_training_checkpoint, new_training, train
    from lacare.config import RunConfig, augment_config, train_config, unet_config
    from lacare.dataset import fold_split, load_prepared
    rc = RunConfig(rc_values)
    cases = load_prepared(prep_dir, split="train")
    train_ids, _ = fold_split([c.case_id for c in cases], fold, folds)
    cases = [c for c in cases if c.case_id in set(train_ids)]
    if resume:
        state = load_training_checkpoint(resume)
    else:
        state = new_training(unet_config(rc), train_config(rc, seed), augment_config(rc))
    train(cases, state, out)
    return os.path.join(out, "final.ckpt")


def cmd_train(args, rc) -> dict:
    _need_dir(args.data, "prepared")
    _distinct(args.out, args.data)
    if args.resume and not os.path.isfile(args.resume):
        raise FileNotFoundError(f"checkpoint not found: {args.resume}")
    ckpt = train_member(args.data, args.out, dict(rc), rc["seed"], args.fold, args.folds,
                        args.resume)
    return {"checkpoint": ckpt, "fold": args.fold, "folds": args.folds}


def cmd_predict(args, rc) -> dict:
    from lacare.cascade.infer import segment_case
    from lacare.cascade.train import load_training_checkpoint
    from lacare.dataset import load_prepared
    from lacare.volume_io import write_labels
    _need_dir(args.data, "prepared")
    _distinct(args.out, args.data)
    for m in args.model:
        if not os.path.isfile(m):
            raise FileNotFoundError(f"model checkpoint not found: {m}")
    models = [load_training_checkpoint(m).model for m in args.model]
    cases = load_prepared(args.data, split=None if args.split == "all" else args.split)
    if not cases:
        raise UsageError(f"no cases in split {args.split!r}")
    os.makedirs(args.out, exist_ok=True)
    for c in cases:
        native, _, _ = segment_case(models, c, rc["eval_crop"], postprocess=False)
        write_labels(native, os.path.join(args.out, f"{c.case_id}_pred.nii"))
    return {"cases": [c.case_id for c in cases], "models": list(args.model)}


def _pred_files(pred_dir: str) -> list[str]:
    files = sorted(f for f in os.listdir(pred_dir) if f.endswith("_pred.nii"))
    if not files:
        raise UsageError(f"no *_pred.nii files in {pred_dir}")
    return files


def cmd_postprocess(args, rc) -> dict:
    from lacare.postprocess import postprocess_labels
    from lacare.volume_io import LabelVolume, read_labels, write_labels
    _need_dir(args.pred, "prediction")
    _distinct(args.out, args.pred)
    files = _pred_files(args.pred)
    os.makedirs(args.out, exist_ok=True)
    for f in files:
        lab = read_labels(os.path.join(args.pred, f))
        data = lab.data
        if rc["postprocess"]:
            data = postprocess_labels(data, rc["dilation_iterations"], rc["connectivity"])
        write_labels(LabelVolume(lab.header, data), os.path.join(args.out, f))
    return {"files": files}


def cmd_evaluate(args, rc) -> dict:
    from lacare.metrics import evaluate_case, write_metrics_csv
    from lacare.phantom import load_manifest
    from lacare.volume_io import read_labels
    _need_dir(args.pred, "prediction")
    _distinct(args.out, args.pred, args.gt)
    manifest, base = load_manifest(args.gt)
    gt_paths = {c["id"]: os.path.join(base, c["label_path"]) for c in manifest["cases"]}
    tasks = (1, 2) if args.task == "both" else (int(args.task),)
    reports = []
    for f in _pred_files(args.pred):
        cid = f[:-len("_pred.nii")]
        if cid not in gt_paths:
            raise UsageError(f"prediction {f} has no ground truth in {args.gt}")
        pred = read_labels(os.path.join(args.pred, f))
        gt = read_labels(gt_paths[cid])
        for task in tasks:
            reports.append(evaluate_case(pred, gt, task, cid))
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), reports)
    return {"cases": len(reports) // len(tasks)}


def member_seed(seed: int, k: int) -> int:
    return seed * 100 + k


def cmd_pipeline(args, rc) -> dict:
    from concurrent.futures import ProcessPoolExecutor
    out = args.out
    d = {k: os.path.join(out, k) for k in ("data", "prep", "models", "pred_raw", "pred", "eval")}
    ns = argparse.Namespace
    cmd_phantom_gen(ns(n=None, n_test=None, domain_shift=None, erase_fraction=None, out=d["data"]), rc)
    cmd_preprocess(ns(data=d["data"], out=d["prep"]), rc)
    k_models = rc["ensemble_size"]
    folds = rc["folds"]
    jobs = [(d["prep"], os.path.join(d["models"], f"m{k}"), dict(rc), member_seed(rc["seed"], k),
             k % folds, folds) for k in range(k_models)]
    workers = min(args.threads, k_models)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            ckpts = list(ex.map(train_member, *zip(*jobs)))
    else:
        ckpts = [train_member(*j) for j in jobs]
    cmd_predict(ns(data=d["prep"], model=ckpts, split="test", out=d["pred_raw"]), rc)
    cmd_postprocess(ns(pred=d["pred_raw"], out=d["pred"]), rc)
    cmd_evaluate(ns(pred=d["pred"], gt=d["data"], task="both", out=d["eval"]), rc)
    return {"checkpoints": ckpts, "metrics": os.path.join(d["eval"], "metrics.csv")}


COMMANDS = {
    ("phantom", "gen"): cmd_phantom_gen,
    ("preprocess", None): cmd_preprocess,
    ("augment", "preview"): cmd_augment_preview,
    ("train", None): cmd_train,
    ("predict", None): cmd_predict,
    ("postprocess", None): cmd_postprocess,
    ("evaluate", None): cmd_evaluate,
    ("pipeline", None): cmd_pipeline,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    t0 = time.perf_counter()
    from lacare.config import ConfigError, load_config
    try:
        args = build_parser().parse_args(argv)
        _set_threads(args.threads)
        rc = load_config(args.config, overrides={"seed": args.seed})
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    from lacare.cascade.model import ConfigurationError
    from lacare.nn import CheckpointError
    from lacare.phantom import ManifestError, PhantomConfigError
    from lacare.volume_io import VolumeIOError
    invalid = (UsageError, ConfigError, ConfigurationError, CheckpointError, ManifestError,
               PhantomConfigError, VolumeIOError, FileNotFoundError)
    fn = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        extra = fn(args, rc)
    except invalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    out = args.out
    _write_run(out, args, argv, rc, t0, extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
