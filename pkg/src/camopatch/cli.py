"""Command-line entry points: train, eval, ablate, compare, export.

Every command is a pure function of its config file, seed and input files;
repeated invocations produce byte-identical primary outputs, with wall-clock
metadata segregated into meta.json. Commands write only inside their output
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from camopatch import __version__, color, evaluation, imaging, optimizer, reporting
from camopatch._kernels import active_backend
from camopatch.config import (
    ConfigError,
    DetectorSelection,
    RunConfig,
    grid_field_to_trainer_field,
    load_grid,
    load_run_config,
    serialize_run_config,
)
from camopatch.detector import (
    CorpusConfig,
    ExternalDetector,
    ToyDetector,
    ToyDetectorParams,
    generate_corpus,
    train_toy_detector,
)


def _acquire_detector(selection: DetectorSelection, base: Path):
    if selection.kind == "external":
        return ExternalDetector(selection.command)
    params_path = (base / selection.params_path).resolve()
    if params_path.exists():
        return ToyDetector(ToyDetectorParams.load(params_path))
    corpus_config = CorpusConfig(seed=selection.corpus_seed)
    params, record = train_toy_detector(corpus_config, seed=selection.train_seed)
    params_path.parent.mkdir(parents=True, exist_ok=True)
    params.save(params_path)
    print(
        f"trained toy detector: val mAP-50 {record.final_val_map:.3f} "
        f"({record.epochs_run} epochs), cached at {params_path}"
    )
    return ToyDetector(params)


def _resolve_config(args) -> tuple[RunConfig, Path]:
    config_path = Path(args.config).resolve()
    cfg = load_run_config(config_path)
    base = config_path.parent
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, trainer=replace(cfg.trainer, seed=args.seed))
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "detector", None):
        cfg = replace(cfg, detector=DetectorSelection.parse(args.detector))
    cfg.validate_paths(base)
    return cfg, base


def _load_dataset(cfg: RunConfig, base: Path, handle):
    """Images, initial boxes (file or detector predictions) and truths."""
    images, names = [], []
    for rel in cfg.images:
        path = (base / rel).resolve()
        images.append(imaging.load_image(path))
        names.append(path.stem)

    boxes = {}
    if cfg.boxes_path:
        stored = imaging.load_boxes(base / cfg.boxes_path)
        for rel in cfg.images:
            key = Path(rel).name
            if key not in stored:
                raise ConfigError(f"no box for image {key} in {cfg.boxes_path}")
            boxes[key] = stored[key]
    else:
        for rel, image in zip(cfg.images, images):
            dets = handle.detect(image, cfg.trainer.target_confidence)
            if not dets:
                raise ConfigError(
                    f"detector found nothing in {rel} at threshold "
                    f"{cfg.trainer.target_confidence}; provide a boxes file"
                )
            boxes[Path(rel).name] = dets[0].box

    truths = None
    if cfg.truths_path:
        stored = imaging.load_truths(base / cfg.truths_path)
        truths = []
        for rel in cfg.images:
            key = Path(rel).name
            if key not in stored:
                raise ConfigError(f"no truth entry for image {key}")
            truths.append(stored[key])
    box_list = [boxes[Path(rel).name] for rel in cfg.images]
    return images, names, box_list, truths


def _write_meta(out: Path, extra: dict | None = None) -> None:
    meta = {
        "version": __version__,
        "backend": active_backend(),
        "finished_utc": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        meta.update(extra)
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def cmd_train(args) -> int:
    cfg, base = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handle = _acquire_detector(cfg.detector, base)
    images, names, boxes, truths = _load_dataset(cfg, base, handle)

    summary_rows = []
    for i, (image, name, box) in enumerate(zip(images, names, boxes)):
        patch_dir = out / "patches" / name
        result = optimizer.train_patch(
            [(image, box)],
            handle,
            cfg.trainer,
            checkpoint_dir=patch_dir,
            truths=[truths[i]] if truths else None,
        )
        imaging.save_image(patch_dir / "patch_final.png", imaging.clip_rgb(result.patch))
        payload = optimizer.sidecar_payload(
            result.patch, result.placements[0], cfg.trainer.steps, cfg.trainer
        )
        (patch_dir / "patch_final.json").write_text(json.dumps(payload, sort_keys=True))
        last = result.record[-1] if result.record else None
        summary_rows.append(
            [name, result.final_perc_distance, last.map50 if last else ""]
        )
        if result.aborted:
            print(f"{name}: aborted ({result.aborted}); partial record kept")
            _write_summary(out, summary_rows)
            _write_meta(out, {"aborted": result.aborted})
            return 1
        print(
            f"{name}: final PerC {result.final_perc_distance:.1f}"
            + (f", patched mAP {last.map50:.1f}" if last else "")
        )

    _write_summary(out, summary_rows)
    (out / "resolved_config.toml").write_text(
        serialize_run_config(_absolutize(cfg, base))
    )
    _write_meta(out)
    return 0


def _absolutize(cfg: RunConfig, base: Path) -> RunConfig:
    images = tuple(str((base / p).resolve()) for p in cfg.images)
    det = cfg.detector
    if det.kind == "toy":
        det = replace(det, params_path=str((base / det.params_path).resolve()))
    return replace(
        cfg,
        images=images,
        boxes_path=str((base / cfg.boxes_path).resolve()) if cfg.boxes_path else "",
        truths_path=str((base / cfg.truths_path).resolve()) if cfg.truths_path else "",
        detector=det,
    )


def _write_summary(out: Path, rows) -> None:
    with (out / "summary.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "final_perc_distance", "final_map50"])
        writer.writerows(rows)


def _evaluate_run(run_dir: Path, cfg: RunConfig, base: Path, handle, no_patch: bool):
    images, names, boxes, truths = _load_dataset(cfg, base, handle)
    if truths is None:
        truths = [[(box, 0)] for box in boxes]
    patched_images = []
    perc_values = []
    for image, name in zip(images, names):
        if no_patch:
            patched_images.append(image)
            perc_values.append(0.0)
            continue
        sidecar = run_dir / "patches" / name / "patch_final.json"
        if not sidecar.exists():
            raise ConfigError(f"no artifact for image {name} under {run_dir}")
        patch, placement, _ = optimizer.load_sidecar(sidecar)
        segment = imaging.extract_segment(image, placement)
        patched_images.append(imaging.apply_patch(image, imaging.clip_rgb(patch), placement))
        perc_values.append(color.perc_distance(imaging.clip_rgb(patch), segment))
    report = evaluation.map50_multi_threshold(handle, patched_images, truths)
    report.mean_perc_distance = float(np.mean(perc_values))
    return report


def cmd_eval(args) -> int:
    run_dir = Path(args.run).resolve()
    config_path = args.config or (run_dir / "resolved_config.toml")
    cfg = load_run_config(config_path)
    base = Path(config_path).resolve().parent
    cfg.validate_paths(base)
    handle = _acquire_detector(cfg.detector, base)
    label = "no-patch" if args.no_patch else run_dir.name
    report = _evaluate_run(run_dir, cfg, base, handle, args.no_patch)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    reporting.write_eval_report_csv(out / "eval_report.csv", report, label)
    (out / "eval_report.md").write_text(reporting.render_eval_report_md(report, label))
    print(
        f"{label}: mAP-50 {report.map50_percent:.2f}%, "
        f"mean PerC {report.mean_perc_distance:.2f}"
    )
    return 0


def cmd_compare(args) -> int:
    out = Path(args.out)
    if args.offline:
        rows = []
        with open(args.offline, newline="") as f:
            for rec in csv.DictReader(f):
                rows.append(
                    (rec["label"], float(rec["map50"]), float(rec["mean_perc"]))
                )
        if len(rows) < 2:
            raise ConfigError("offline comparison needs at least 2 rows")
    else:
        runs = [Path(r).resolve() for r in args.runs]
        labels = args.labels or [r.name for r in runs]
        if len(labels) != len(runs):
            raise ConfigError("need one label per run")
        if len(runs) < 2:
            raise ConfigError("need at least 2 runs to compare")
        rows = []
        image_sets = []
        for run_dir, label in zip(runs, labels):
            cfg = load_run_config(run_dir / "resolved_config.toml")
            base = run_dir
            image_sets.append(tuple(cfg.images))
            handle = _acquire_detector(cfg.detector, base)
            report = _evaluate_run(run_dir, cfg, base, handle, no_patch=False)
            rows.append((label, report.map50_percent, report.mean_perc_distance))
        if len(set(image_sets)) != 1:
            raise ConfigError("compared runs must share the same image set")
    score_rows = evaluation.combined_rank_score(rows)
    out.mkdir(parents=True, exist_ok=True)
    reporting.write_score_table_csv(out / "compare.csv", score_rows)
    (out / "compare.md").write_text(reporting.render_score_table_md(score_rows))
    for r in score_rows:
        print(
            f"{r.label}: mAP {r.map50:.2f} (rank {r.rank_map}), "
            f"PerC {r.mean_perc:.2f} (rank {r.rank_perc}), score {r.combined_score}"
        )
    return 0


def cmd_ablate(args) -> int:
    grid_path = Path(args.grid).resolve()
    grid = load_grid(grid_path)
    config_path = (grid_path.parent / grid.base_config).resolve()
    cfg = load_run_config(config_path)
    base = config_path.parent
    cfg.validate_paths(base)
    out = Path(args.out or cfg.out_dir)

    handle = _acquire_detector(cfg.detector, base)
    images, names, boxes, truths = _load_dataset(cfg, base, handle)
    if truths is None:
        truths = [[(box, 0)] for box in boxes]
    images_with_boxes = list(zip(images, boxes))

    current = cfg.trainer
    results = []
    for study in grid.studies:
        cells = evaluation.run_ablation(
            [
                (v.label, grid_field_to_trainer_field(v.field), v.value)
                for v in study.variants
            ],
            current,
            handle,
            images_with_boxes,
            truths,
        )
        results.append((study.name, cells))
        ok = [c for c in cells if not c.failed and c.row]
        if ok:
            winner = min(ok, key=lambda c: (c.row.combined_score, c.label))
            print(
                f"study {study.name!r}: best {winner.label!r} "
                f"(score {winner.row.combined_score})"
            )
            if study.carry_forward:
                current = evaluation.override_config(
                    current, winner.field, winner.value
                )

    out.mkdir(parents=True, exist_ok=True)
    reporting.write_ablation_csv(out / "ablation.csv", results)
    (out / "ablation.md").write_text(reporting.render_ablation_md(results))
    _write_meta(out)
    return 0


def cmd_export(args) -> int:
    if args.what == "corpus":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        corpus = generate_corpus(CorpusConfig(seed=args.seed))
        split_images = corpus.val_images if args.split == "val" else corpus.train_images
        split_truths = corpus.val_truths if args.split == "val" else corpus.train_truths
        count = min(args.count, len(split_images))
        truths, boxes = {}, {}
        for i in range(count):
            name = f"{args.split}_{i:03d}.png"
            imaging.save_image(out / name, split_images[i])
            truths[name] = split_truths[i]
            boxes[name] = split_truths[i][0][0]
        imaging.save_truths(out / "truths.json", truths)
        imaging.save_boxes(out / "boxes.json", boxes)
        print(f"wrote {count} {args.split} images + truths.json + boxes.json to {out}")
        return 0

    # patch export: sidecar floats -> printable 8-bit PNG view
    patch, _, _ = optimizer.load_sidecar(args.artifact)
    target = Path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    imaging.save_image(target, imaging.clip_rgb(patch))
    print(f"wrote {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camopatch",
        description="Detection-suppressing adversarial patches with low perceptual colour distance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one patch per configured image")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out")
    p_train.add_argument("--detector", help="toy or external:<command>")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a training run's artifacts")
    p_eval.add_argument("--run", required=True)
    p_eval.add_argument("--config")
    p_eval.add_argument("--out")
    p_eval.add_argument("--no-patch", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run an ablation grid")
    p_ablate.add_argument("--grid", required=True)
    p_ablate.add_argument("--out")
    p_ablate.set_defaults(func=cmd_ablate)

    p_cmp = sub.add_parser("compare", help="rank runs by mAP and PerC distance")
    p_cmp.add_argument("--runs", nargs="*", default=[])
    p_cmp.add_argument("--labels", nargs="*")
    p_cmp.add_argument("--offline", help="CSV with label,map50,mean_perc columns")
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_exp = sub.add_parser("export", help="export corpus images or a patch PNG")
    exp_sub = p_exp.add_subparsers(dest="what", required=True)
    p_corpus = exp_sub.add_parser("corpus")
    p_corpus.add_argument("--out", required=True)
    p_corpus.add_argument("--seed", type=int, default=0)
    p_corpus.add_argument("--split", choices=("train", "val"), default="val")
    p_corpus.add_argument("--count", type=int, default=8)
    p_patch = exp_sub.add_parser("patch")
    p_patch.add_argument("--artifact", required=True)
    p_patch.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ConnectionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
