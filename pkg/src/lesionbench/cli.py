"""Command-line entry point: ``lesionbench <subcommand> ...``.

Failures print a one-line JSON error record to stderr (and to ``--error-file``
when given) and exit with status 1; usage errors exit with status 2.

Set ``LESIONBENCH_DEVICE`` to ``cpu`` to hide accelerators, or to a device
index list (``0``, ``0,1``) to pick them; it is applied before TensorFlow loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

DEVICE_ENV = "LESIONBENCH_DEVICE"


def _select_device() -> None:
    dev = os.environ.get(DEVICE_ENV)
    if dev is None:
        return
    os.environ["CUDA_VISIBLE_DEVICES"] = "-1" if dev.strip().lower() == "cpu" else dev.strip()


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(a) -> int:
    from .data import dedup, ingest_directory, save_manifest

    m = ingest_directory(a.root, source=a.source)
    n = len(m)
    if a.dedup_threshold >= 0:
        m = dedup(m, a.dedup_threshold)
    save_manifest(m, a.out)
    counts = m.class_counts()
    print(json.dumps({"manifest": str(a.out), "images": len(m), "duplicates_removed": n - len(m),
                      "skipped": len(m.skipped), "class_counts": counts}))
    return 0


def cmd_split(a) -> int:
    from .data import load_manifest, stratified_kfold

    plan = stratified_kfold(load_manifest(a.manifest), a.k, a.seed)
    plan.save(a.out)
    print(json.dumps({"foldplan": str(a.out), "k": plan.k, "fold_sizes": [len(f) for f in plan.folds]}))
    return 0


def cmd_augment(a) -> int:
    from .augment import AugmentationSpec, build_paper_spec, expand
    from .data import FoldPlan, load_manifest, make_run_splits

    m = load_manifest(a.manifest)
    splits = make_run_splits(FoldPlan.load(a.foldplan), a.fold, m, a.val_fraction, a.seed)
    spec = AugmentationSpec(build_paper_spec().ops, a.expansion_factor)
    out = Path(a.out_dir)
    aug = expand(splits.train_ids, m, spec, a.seed, out)
    aug.write_lineage(out / "lineage.csv")
    (out / "split.json").write_text(json.dumps(splits.to_dict(), indent=2) + "\n")
    print(json.dumps({"images": len(aug), "sources": len(splits.train_ids), "lineage": str(out / "lineage.csv")}))
    return 0


def cmd_train(a) -> int:
    from .config import load_config
    from .pipeline import run_experiment
    from .report import regenerate

    cfg = load_config(a.config)
    res = run_experiment(cfg, a.seed, resume=not a.no_resume)
    regenerate(res.root)
    print(json.dumps({"results": str(res.root), "completed": len(res.completed), "skipped": len(res.skipped),
                      "failed": [f"{c}/fold{f}" for c, f in res.failed]}))
    if res.failed:
        raise CliError(f"{len(res.failed)} run(s) failed; see error.json in their run directories")
    return 0


def cmd_evaluate(a) -> int:
    from .data import load_manifest
    from .metrics import PredictionSet
    from .report import evaluate_ensemble, evaluate_external

    m = load_manifest(a.manifest)
    preds = [PredictionSet.read_csv(p, a.threshold) for p in a.predictions]
    if len(preds) == 1:
        text = evaluate_external(preds[0], m).to_json()
    else:
        reports, agg = evaluate_ensemble(preds, m)
        text = json.dumps({"models": [json.loads(r.to_json()) for r in reports], "aggregate": agg.to_dict()},
                          indent=2, sort_keys=True) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_compare(a) -> int:
    from .stats import AccuracyMatrix, compare, render_cd_diagram

    acc = AccuracyMatrix.from_long_csv(a.accuracy)
    ranks, cd = compare(acc, a.alpha)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cd_result.json").write_text(cd.to_json())
    (out / "cd_diagram.svg").write_text(render_cd_diagram(ranks, cd, a.title))
    sys.stdout.write(cd.to_json())
    return 0


def cmd_profile(a) -> int:
    import numpy as np

    from .backbones import build_backbone, describe
    from .complexity import ComplexityReport, count_flops, count_params, measure_runtime_profile, write_complexity_csv
    from .transfer import attach_head

    reports = []
    for name in a.backbones:
        desc = describe(name, "none")
        if a.input_size:
            desc = desc.with_input_size(a.input_size)
        model = attach_head(build_backbone(desc))
        if a.timed:
            model.compile("adam", "binary_crossentropy")
            rng = np.random.default_rng(0)
            x = rng.uniform(0, 255, (a.batch_size * a.train_batches, *desc.input_shape)).astype("float32")
            y = rng.integers(0, 2, len(x)).astype("float32")
            import tensorflow as tf

            stream = tf.data.Dataset.from_tensor_slices((x, y)).batch(a.batch_size)
            rep = measure_runtime_profile(model, stream, x[0], name, a.reps, a.epochs, cpu_ok=a.cpu_ok)
        else:
            rep = ComplexityReport(name, count_params(model) / 1e6, count_flops(model) / 1e9,
                                   None, None, None, None, desc.input_shape)
        reports.append(rep)
        print(json.dumps({"model": name, "params_millions": round(rep.params_millions, 4),
                          "flops_giga": round(rep.flops_giga, 4)}))
    write_complexity_csv(reports, a.out)
    return 0


def cmd_explain(a) -> int:
    import numpy as np

    from .explain import grad_cam, write_outputs
    from .pipeline import load_trained, model_input

    model, phases = load_trained(a.run_dir)
    size = tuple(model.inputs[0].shape[1:3])
    if a.ids:
        from .data import load_manifest

        if not a.manifest:
            raise CliError("--ids needs --manifest")
        recs = load_manifest(a.manifest).by_id()
        unknown = [i for i in a.ids if i not in recs]
        if unknown:
            raise CliError(f"ids not in manifest: {', '.join(unknown)}")
        items = [(i, recs[i].path) for i in a.ids]
    else:
        items = [(Path(p).stem, p) for p in a.images]
    written = []
    for image_id, path in items:
        rgb, x = model_input(path, phases["backbone"], size)
        score = float(np.asarray(model(x[None], training=False)).reshape(-1)[0])
        target = a.target_class if a.target_class is not None else int(score >= 0.5)
        h = grad_cam(model, x, target, a.layer, phases["backbone"])
        png, grid = write_outputs(image_id, h, rgb, a.out_dir)
        written.append({"id": image_id, "score": score, "target_class": target, "layer": h.source_layer,
                        "overlay": png, "grid": grid})
    print(json.dumps(written))
    return 0


def cmd_report(a) -> int:
    from .complexity import read_complexity_csv
    from .report import regenerate

    complexity = read_complexity_csv(a.complexity) if a.complexity else None
    written = regenerate(a.results, complexity, a.alpha)
    print(json.dumps({name: str(p) for name, p in sorted(written.items())}))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesionbench", description="Transfer-learning benchmark for binary lesion classification")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--error-file", help="also write the JSON error record here on failure")
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    s = sub.add_parser("ingest", help="scan a class-per-directory dataset into a manifest")
    s.add_argument("--root", required=True)
    s.add_argument("--out", default="manifest.csv")
    s.add_argument("--source", default="")
    s.add_argument("--dedup-threshold", type=int, default=0, help="dHash Hamming threshold; -1 keeps duplicates")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="stratified k-fold plan")
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="foldplan.json")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("augment", help="write the augmented training set of one fold rotation")
    s.add_argument("--manifest", required=True)
    s.add_argument("--foldplan", required=True)
    s.add_argument("--fold", type=int, required=True, help="test fold of the rotation")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-fraction", type=float, default=0.10)
    s.add_argument("--expansion-factor", type=int, default=20)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="run every (backbone, strategy, fold) of a configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, help="override the configuration seed")
    s.add_argument("--no-resume", action="store_true", help="retrain runs that already finished")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics for external prediction files over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--predictions", nargs="+", required=True, help="one file, or one per ensemble member")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="Friedman test, Nemenyi CD and CD diagram")
    s.add_argument("--accuracy", required=True, help="model,fold,accuracy CSV")
    s.add_argument("--alpha", type=float, default=0.10)
    s.add_argument("--title", default="")
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("profile", help="parameter and FLOP counts, optionally timed")
    s.add_argument("--backbones", nargs="+", required=True)
    s.add_argument("--input-size", type=int)
    s.add_argument("--timed", action="store_true", help="also time training/inference and measure disk and memory")
    s.add_argument("--cpu-ok", action="store_true", help="allow timing without an accelerator")
    s.add_argument("--reps", type=int, default=300)
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--train-batches", type=int, default=4)
    s.add_argument("--out", default="complexity.csv")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("explain", help="Grad-CAM overlays for a trained run")
    s.add_argument("--run-dir", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--ids", nargs="+")
    g.add_argument("--images", nargs="+")
    s.add_argument("--manifest")
    s.add_argument("--target-class", type=int, choices=(0, 1), help="default: the predicted class")
    s.add_argument("--layer")
    s.add_argument("--out-dir", default="cams")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("report", help="regenerate summaries, tables and figures from run directories")
    s.add_argument("--results", required=True, help="a <output_dir>/<run_id> directory")
    s.add_argument("--complexity")
    s.add_argument("--alpha", type=float, default=0.10)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _select_device()
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable record
        rec = {"error": type(exc).__name__, "message": str(exc), "subcommand": args.command}
        line = json.dumps(rec, sort_keys=True)
        print(line, file=sys.stderr)
        if args.error_file:
            Path(args.error_file).write_text(line + "\n")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
