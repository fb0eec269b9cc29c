"""Ablation matrix over backbone x augmentation x dataset variant, with resumable results."""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import yaml
from filelock import FileLock, Timeout

from .classifier import VARIANTS, ClassifierTrainConfig, ExperimentResult, train_classifier
from .datasets import (
    EUROSAT_CLASSES,
    DatasetIndex,
    merge_generated,
    scan_dataset,
    split,
    subset_index,
    write_manifest,
)
from .validation import derive_seed

logger = logging.getLogger(__name__)

PLAN_VERSION = 1
BACKBONE_NAMES = ("vgg16", "wide_resnet50")
AUGMENTS = ("none", "geometric")
MODEL_ROWS = [(b, a) for b in BACKBONE_NAMES for a in AUGMENTS]
ROW_LABELS = {
    ("vgg16", "none"): "VGG16 without augmentation",
    ("vgg16", "geometric"): "VGG16 with augmentation",
    ("wide_resnet50", "none"): "Resnet50 without augmentation",
    ("wide_resnet50", "geometric"): "Resnet50 with augmentation",
}
VARIANT_LABELS = {"baseline": "Baseline", "dcgan_merged": "DCGAN", "wgan_gp_merged": "WGAN-GP"}
VARIANT_ALIASES = {
    "baseline": "baseline",
    "dcgan": "dcgan_merged",
    "dcgan_merged": "dcgan_merged",
    "wgan-gp": "wgan_gp_merged",
    "wgan_gp": "wgan_gp_merged",
    "wgan_gp_merged": "wgan_gp_merged",
}
GAN_FOR_VARIANT = {"dcgan_merged": "dcgan", "wgan_gp_merged": "wgan_gp"}


def canonical_variant(name: str) -> str:
    try:
        return VARIANT_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown dataset variant {name!r}") from None


@dataclass(frozen=True)
class AblationCell:
    backbone: str
    augment: str
    variant: str
    seed: int

    @property
    def key(self) -> str:
        return f"{self.backbone}|{self.augment}|{self.variant}|{self.seed}"


@dataclass
class AblationPlan:
    """Cells to run plus shared data settings.

    ``classes`` / ``per_class`` subset the corpus and ``max_epochs`` caps every
    cell when ``desk_scale`` is set. ``overrides`` are passed to
    :class:`ClassifierTrainConfig`.
    """

    cells: tuple[AblationCell, ...]
    seed: int = 0
    data_root: str | None = None
    generated: dict[str, str] = field(default_factory=dict)
    desk_scale: bool = False
    classes: tuple[str, ...] = ("AnnualCrop", "Forest", "SeaLake")
    per_class: int = 300
    max_epochs: int = 10
    split_ratio: float = 0.75
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = tuple(self.cells)
        keys = [c.key for c in self.cells]
        if len(set(keys)) != len(keys):
            raise ValueError("ablation plan contains duplicate cells")

    @staticmethod
    def cell_seed(plan_seed: int, backbone: str, augment: str, variant: str) -> int:
        return derive_seed(plan_seed, backbone, augment, variant) % 2**31

    @classmethod
    def matrix(
        cls,
        seed: int = 0,
        backbones: Sequence[str] = BACKBONE_NAMES,
        augments: Sequence[str] = AUGMENTS,
        variants: Sequence[str] = VARIANTS,
        **kwargs,
    ) -> "AblationPlan":
        cells = [
            AblationCell(b, a, v, cls.cell_seed(seed, b, a, v))
            for b in backbones
            for a in augments
            for v in map(canonical_variant, variants)
        ]
        return cls(tuple(cells), seed=seed, **kwargs)

    @classmethod
    def desk(cls, seed: int = 0, **kwargs) -> "AblationPlan":
        return cls.matrix(seed, desk_scale=True, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "AblationPlan":
        """Read a YAML plan.

        Either ``cells`` (a list of ``{backbone, augment, variant}`` mappings)
        or ``matrix`` (lists of ``backbones``, ``augments``, ``variants``) may
        be given; the full 12-cell matrix is used when both are absent.
        """
        raw = yaml.safe_load(Path(path).read_text()) or {}
        version = raw.pop("version", PLAN_VERSION)
        if version != PLAN_VERSION:
            raise ValueError(f"unsupported plan version {version}")
        seed = int(raw.pop("seed", 0))
        cells = raw.pop("cells", None)
        matrix = raw.pop("matrix", {}) or {}
        desk = raw.pop("desk_scale", False)
        for key in ("classes",):
            if key in raw:
                raw[key] = tuple(raw[key])
        if cells:
            built = []
            for c in cells:
                v = canonical_variant(c["variant"])
                built.append(AblationCell(c["backbone"], c["augment"], v,
                                          int(c.get("seed", cls.cell_seed(seed, c["backbone"], c["augment"], v)))))
            return cls(tuple(built), seed=seed, desk_scale=desk, **raw)
        return cls.matrix(seed, desk_scale=desk, **matrix, **raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = PLAN_VERSION
        return d

    def config_for(self, cell: AblationCell) -> ClassifierTrainConfig:
        params = {**self.overrides, "backbone": cell.backbone,
                  "use_geometric": cell.augment == "geometric", "seed": cell.seed}
        cfg = ClassifierTrainConfig(**params)
        if self.desk_scale:
            cfg.max_epochs = min(cfg.max_epochs, self.max_epochs)
        return cfg


class ResultStore:
    """Append-only JSON-lines record of finished (or failed) cells.

    Appends go through a file lock; each running cell also holds its own
    lock so concurrent runners never execute the same cell twice.
    """

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / "results.jsonl"
        self._lock = FileLock(str(self.path) + ".lock")
        (self.out_dir / "claims").mkdir(exist_ok=True)

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self._lock:
            lines = self.path.read_text().splitlines()
        return [json.loads(line) for line in lines if line.strip()]

    def completed(self) -> dict[str, ExperimentResult]:
        done = {}
        for e in self.entries():
            if e["status"] == "ok":
                done[e["key"]] = ExperimentResult.from_dict(e["result"])
        return done

    def failures(self) -> dict[str, str]:
        done = self.completed()
        return {e["key"]: e["error"] for e in self.entries() if e["status"] == "failed" and e["key"] not in done}

    def append(self, key: str, status: str, result: ExperimentResult | None = None,
               error: str | None = None) -> None:
        entry = {"key": key, "status": status,
                 "result": result.to_dict() if result is not None else None, "error": error}
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def claim(self, key: str) -> FileLock:
        safe = key.replace("|", "__")
        return FileLock(str(self.out_dir / "claims" / f"{safe}.lock"), timeout=0)

    def results(self) -> list[ExperimentResult]:
        return list(self.completed().values())


def build_variants(
    data_root: str | Path,
    generated: Mapping[str, str | Path],
    class_set: Sequence[str] = EUROSAT_CLASSES,
    seed: int = 0,
    ratio: float = 0.75,
    manifest_dir: str | Path | None = None,
    classes: Sequence[str] | None = None,
    per_class: int | None = None,
) -> dict[str, DatasetIndex]:
    """Baseline index plus one merged index per GAN kind.

    ``generated`` maps ``"dcgan"`` / ``"wgan_gp"`` to directories laid out as
    ``<dir>/<Class>/*.png``. With ``classes`` and ``per_class`` the real
    corpus is subsampled first and only those classes' generated images are
    merged.
    """
    index = scan_dataset(data_root, class_set)
    if classes is not None and per_class is not None:
        index = subset_index(index, classes, per_class, seed)
    baseline = split(index, ratio, seed)
    variants = {"baseline": baseline}
    for variant, kind in GAN_FOR_VARIANT.items():
        gen_dir = generated.get(kind) or generated.get(kind.replace("_", "-"))
        if gen_dir is None or not Path(gen_dir).is_dir() or not any(Path(gen_dir).iterdir()):
            raise FileNotFoundError(f"variant {variant}: no generated {kind} images found ({gen_dir})")
        merged = merge_generated(baseline, gen_dir, kind, classes=baseline.classes)
        if len(merged) == len(baseline):
            raise FileNotFoundError(f"variant {variant}: generated {kind} directory has no images")
        variants[variant] = merged
    if manifest_dir is not None:
        for name, idx in variants.items():
            write_manifest(idx, Path(manifest_dir) / f"manifest_{name}.csv")
    for name, idx in variants.items():
        ratios = augmentation_ratios(idx)
        logger.info("%s: %d records, generated/corpus=%.4f generated/train=%.4f",
                    name, len(idx), ratios["of_corpus"], ratios["of_train"])
    return variants


def augmentation_ratios(index: DatasetIndex) -> dict[str, float]:
    """Generated-image count relative to the real corpus and to the real train split."""
    generated = sum(r.source != "real" for r in index.records)
    real = [r for r in index.records if r.source == "real"]
    real_train = sum(index.split_assignment.get(r.path) == "train" for r in real)
    return {
        "of_corpus": generated / len(real) if real else 0.0,
        "of_train": generated / real_train if real_train else 0.0,
    }


TrainFn = Callable[..., ExperimentResult]


def run_ablation(
    plan: AblationPlan,
    variants: Mapping[str, DatasetIndex],
    out_dir: str | Path,
    train_fn: TrainFn = train_classifier,
    n_jobs: int = 1,
) -> list[ExperimentResult]:
    """Run every cell not already stored under ``out_dir``.

    A failing cell is recorded and the remaining cells still run. Results come
    back in plan order and include cells loaded from a previous run.
    """
    missing = sorted({c.variant for c in plan.cells} - set(variants))
    if missing:
        raise ValueError(f"dataset variant(s) not available: {', '.join(missing)}")
    store = ResultStore(out_dir)
    (Path(out_dir) / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True))
    done = store.completed()
    todo = [c for c in plan.cells if c.key not in done]
    logger.info("%d cells stored, %d to run", len(plan.cells) - len(todo), len(todo))

    def execute(cell: AblationCell) -> None:
        lock = store.claim(cell.key)
        try:
            lock.acquire()
        except Timeout:
            logger.warning("cell %s is claimed by another runner; skipping", cell.key)
            return
        try:
            if cell.key in store.completed():
                return
            index = variants[cell.variant]
            result = train_fn(index.records_in("train"), index.records_in("val"),
                              plan.config_for(cell), dataset_variant=cell.variant)
            store.append(cell.key, "ok", result)
        except Exception as exc:  # recorded, the matrix continues
            logger.error("cell %s failed: %s", cell.key, exc)
            store.append(cell.key, "failed", error="".join(traceback.format_exception_only(type(exc), exc)).strip())
        finally:
            lock.release()

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            list(pool.map(execute, todo))
    else:
        for cell in todo:
            execute(cell)

    done = store.completed()
    return [done[c.key] for c in plan.cells if c.key in done]


# --------------------------------------------------------------------------
# reporting


def load_fixtures(path: str | Path | None = None, name: str = "gan_augmentation") -> list[dict]:
    if path is None:
        text = resources.files("lulc_gan").joinpath("data/reference_results.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)["sets"][name]


@dataclass
class ReportTable:
    rows: list[dict]

    COLUMNS = ("model", "variant", "epochs", "accuracy", "ref_epochs", "ref_accuracy", "delta_accuracy")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row[k], k) for k in self.COLUMNS})
        return buf.getvalue()

    def to_text(self) -> str:
        models = list(dict.fromkeys(r["model"] for r in self.rows))
        width = max(len(m) for m in models) + 2
        head1 = " " * width + "".join(f"{VARIANT_LABELS[v]:^26}" for v in VARIANTS)
        head2 = f"{'Model':<{width}}" + "".join(f"{'Epochs':>8}{'Acc %':>9}{'(ref)':>9}" for _ in VARIANTS)
        lines = [head1, head2, "-" * len(head2)]
        for m in models:
            cells = {r["variant"]: r for r in self.rows if r["model"] == m}
            line = f"{m:<{width}}"
            for v in VARIANTS:
                r = cells.get(v)
                if r is None:
                    line += f"{'':>26}"
                    continue
                ref = "" if r["ref_accuracy"] is None else f"{r['ref_accuracy']:.2f}"
                ep = "" if r["epochs"] is None else str(r["epochs"])
                acc = "" if r["accuracy"] is None else f"{r['accuracy']:.2f}"
                if r["ref_epochs"] is not None:
                    ep = f"{ep}/{r['ref_epochs']}" if ep else f"-/{r['ref_epochs']}"
                line += f"{ep:>8}{acc:>9}{ref:>9}"
            lines.append(line)
        return "\n".join(lines) + "\n"


def _fmt(value, column: str) -> str:
    if value is None:
        return ""
    if column in ("accuracy", "ref_accuracy", "delta_accuracy"):
        return f"{value:.2f}"
    return str(value)


def render_report(results: Sequence[ExperimentResult], fixtures: Sequence[dict] | None = None) -> ReportTable:
    """Lay results out by model configuration and variant, next to reference values.

    Accuracies are percentages. When several seeds ran for the same
    configuration, the seed is appended to the row label.
    """
    if not results:
        raise ValueError("no results to report")
    fixtures = list(fixtures or [])
    seeds_per_cfg: dict[tuple, set] = {}
    for r in results:
        seeds_per_cfg.setdefault((r.backbone, r.augment, r.dataset_variant), set()).add(r.seed)
    multi_seed = any(len(s) > 1 for s in seeds_per_cfg.values())

    refs = {(f["backbone"], f["augment"], canonical_variant(f["variant"])): f for f in fixtures}
    rows = []
    seen = set()
    for r in results:
        label = ROW_LABELS.get((r.backbone, r.augment), f"{r.backbone} ({r.augment})")
        if multi_seed:
            label += f" [seed {r.seed}]"
        key = (label, r.dataset_variant)
        if key in seen:
            raise ValueError(f"duplicate result for {label} / {r.dataset_variant}")
        seen.add(key)
        ref = refs.get((r.backbone, r.augment, r.dataset_variant))
        acc = 100.0 * r.best_val_accuracy
        rows.append({
            "model": label,
            "variant": r.dataset_variant,
            "epochs": r.epochs_run,
            "accuracy": acc,
            "ref_epochs": ref["epochs"] if ref else None,
            "ref_accuracy": ref["accuracy"] if ref else None,
            "delta_accuracy": acc - ref["accuracy"] if ref else None,
        })
    if not multi_seed:
        measured = {(r["model"], r["variant"]) for r in rows}
        for (b, a, v), ref in refs.items():
            label = ROW_LABELS.get((b, a), f"{b} ({a})")
            if (label, v) not in measured:
                rows.append({"model": label, "variant": v, "epochs": None, "accuracy": None,
                             "ref_epochs": ref["epochs"], "ref_accuracy": ref["accuracy"],
                             "delta_accuracy": None})
    order = {lbl: i for i, lbl in enumerate(ROW_LABELS.values())}
    rows.sort(key=lambda row: (order.get(row["model"].split(" [")[0], 99), row["model"],
                               VARIANTS.index(row["variant"]) if row["variant"] in VARIANTS else 99))
    return ReportTable(rows)


def write_result_rows(results: Sequence[ExperimentResult], path: str | Path) -> Path:
    """``backbone,augment,variant,epochs,best_val_accuracy,stopped_early`` per run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ExperimentResult.ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow(r.to_row())
    return path
