"""Command-line entry point: ``lulc-gan <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .classifier import ClassifierTrainConfig, train_classifier
from .datasets import EUROSAT_CLASSES, scan_dataset, split, subset_index, write_manifest
from .harness import (
    AblationPlan,
    ResultStore,
    build_variants,
    canonical_variant,
    load_fixtures,
    render_report,
    run_ablation,
    write_result_rows,
)
from .trainer import GanTrainConfig, canonical_kind, generate_images, train_gan

logger = logging.getLogger("lulc_gan")


def _single_threaded() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _generated_dirs(root: str | None) -> dict[str, str]:
    if root is None:
        return {}
    return {kind: str(Path(root) / kind) for kind in ("dcgan", "wgan_gp")}


def cmd_index(args) -> int:
    index = split(scan_dataset(args.data_root, args.classes or EUROSAT_CLASSES), args.ratio, args.seed)
    write_manifest(index, args.out)
    print(f"{len(index)} records -> {args.out} {index.split_counts()}")
    return 0


def cmd_train_gan(args) -> int:
    config = GanTrainConfig(
        gan_kind=args.gan,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        n_critic=args.n_critic,
        lambda_gp=args.lambda_gp,
        seed=args.seed,
        class_name=args.class_name,
        checkpoint_interval=args.checkpoint_interval,
    )
    index = scan_dataset(args.data_root)
    if args.class_name not in index.classes:
        raise SystemExit(f"class {args.class_name!r} not found under {args.data_root}")
    if args.all_images:
        records = index.with_label(args.class_name)
    else:
        # only training images feed the GAN, so validation stays unseen
        records = [r for r in split(index, 0.75, args.split_seed).records_in("train")
                   if r.label == args.class_name]
    out = Path(args.out)
    stem = f"{args.class_name}_{config.gan_kind}"
    ckpt, history = train_gan(records, config, checkpoint_dir=out / "checkpoints")
    ckpt.save(out / f"{stem}.pt")
    history.to_csv(out / f"{stem}_history.csv")
    print(f"trained {stem} on {len(records)} images for {config.epochs} epochs -> {out / (stem + '.pt')}")
    return 0


def cmd_generate(args) -> int:
    paths = generate_images(args.checkpoint, args.count, args.seed, args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_train_classifier(args) -> int:
    variant = canonical_variant(args.variant)
    out = Path(args.out)
    variants = None
    if variant == "baseline":
        index = scan_dataset(args.data_root)
        if args.classes and args.per_class:
            index = subset_index(index, args.classes, args.per_class, args.split_seed)
        index = split(index, 0.75, args.split_seed)
        write_manifest(index, out / "manifest_baseline.csv")
    else:
        if args.generated_root is None:
            raise SystemExit("--generated-root is required for GAN-merged variants")
        variants = build_variants(
            args.data_root, _generated_dirs(args.generated_root), seed=args.split_seed,
            manifest_dir=out, classes=args.classes, per_class=args.per_class,
        )
        index = variants[variant]
    overrides = {k: v for k, v in {"max_epochs": args.max_epochs, "batch_size": args.batch_size,
                                   "initial_lr": args.lr, "image_size": args.image_size}.items() if v is not None}
    config = ClassifierTrainConfig(
        backbone=args.backbone, use_geometric=args.augment == "geometric", seed=args.seed,
        pretrained=not args.no_pretrained, **overrides,
    )
    result = train_classifier(index.records_in("train"), index.records_in("val"), config,
                              dataset_variant=variant)
    write_result_rows([result], out / "result.csv")
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    print(json.dumps(result.to_row()))
    return 0


def cmd_ablate(args) -> int:
    plan = AblationPlan.from_file(args.plan)
    if args.desk_scale:
        plan.desk_scale = True
    data_root = args.data_root or plan.data_root
    if data_root is None:
        raise SystemExit("no data root given (use --data-root or data_root in the plan)")
    generated = _generated_dirs(args.generated_root) or plan.generated
    needed = {c.variant for c in plan.cells}
    subset = dict(classes=plan.classes, per_class=plan.per_class) if plan.desk_scale else {}
    if needed == {"baseline"}:
        index = scan_dataset(data_root)
        if subset:
            index = subset_index(index, subset["classes"], subset["per_class"], plan.seed)
        variants = {"baseline": split(index, plan.split_ratio, plan.seed)}
        write_manifest(variants["baseline"], Path(args.out) / "manifest_baseline.csv")
    else:
        variants = build_variants(data_root, generated, seed=plan.seed, ratio=plan.split_ratio,
                                  manifest_dir=args.out, **subset)
    results = run_ablation(plan, variants, args.out, n_jobs=args.jobs)
    write_result_rows(results, Path(args.out) / "results.csv")
    failures = ResultStore(args.out).failures()
    print(f"{len(results)} cells complete, {len(failures)} failed")
    return 1 if failures else 0


def cmd_report(args) -> int:
    results = ResultStore(args.results).results()
    fixtures = load_fixtures(args.fixtures) if args.fixtures != "none" else []
    table = render_report(results, fixtures)
    sys.stdout.write(table.to_csv() if args.format == "csv" else table.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lulc-gan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="scan a corpus and write a split manifest")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--classes", nargs="+")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train-gan", help="train one per-class generator")
    p.add_argument("--gan", required=True, type=canonical_kind, metavar="{dcgan,wgan-gp}")
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--n-critic", type=int, default=5)
    p.add_argument("--lambda-gp", type=float, default=10.0)
    p.add_argument("--checkpoint-interval", type=int, default=50)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--all-images", action="store_true",
                   help="train on every image of the class, validation images included")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("generate", help="export PNGs from a generator checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-classifier", help="fine-tune one backbone on one dataset variant")
    p.add_argument("--backbone", required=True, choices=["vgg16", "wide_resnet50"])
    p.add_argument("--augment", default="none", choices=["none", "geometric"])
    p.add_argument("--variant", default="baseline", choices=["baseline", "dcgan", "wgan-gp"])
    p.add_argument("--data-root", required=True)
    p.add_argument("--generated-root", help="directory holding dcgan/<Class>/ and wgan_gp/<Class>/")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--image-size", type=int, help="backbone input size (default 224)")
    p.add_argument("--classes", nargs="+")
    p.add_argument("--per-class", type=int)
    p.add_argument("--no-pretrained", action="store_true",
                   help="random backbone weights (pipeline checks only)")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("ablate", help="run an ablation plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--data-root")
    p.add_argument("--generated-root")
    p.add_argument("--out", required=True)
    p.add_argument("--desk-scale", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render stored results next to reference values")
    p.add_argument("--results", required=True)
    p.add_argument("--fixtures", default=None,
                   help="reference JSON file; packaged values by default, 'none' to omit")
    p.add_argument("--format", choices=["csv", "table"], default="table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    _single_threaded()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
