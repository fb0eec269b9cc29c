"""Transfer-learning classifier: frozen pretrained backbone plus a trainable head."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import train_test_split

from .datasets import AugmentPolicy, ImageRecord, batch_from_arrays, load_images
from .validation import CLASSIFIER_IMAGE_SIZE, check_labels, check_uint8_images, derive_seed, fingerprint

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "dcgan_merged", "wgan_gp_merged")


class PretrainedWeightsUnavailable(RuntimeError):
    pass


# --------------------------------------------------------------------------
# backbones


def _load_torchvision(builder, weights, pretrained: bool):
    if not pretrained:
        return builder(weights=None)
    try:
        return builder(weights=weights)
    except Exception as exc:  # torchvision surfaces URLError, HTTPError, RuntimeError
        target = Path(torch.hub.get_dir()) / "checkpoints" / Path(weights.url).name
        raise PretrainedWeightsUnavailable(
            f"could not load pretrained weights for {builder.__name__}: {exc}\n"
            f"Download {weights.url} and place it at {target} "
            "(or set TORCH_HOME to a directory containing hub/checkpoints/)."
        ) from exc


def _vgg16(pretrained: bool):
    from torchvision.models import VGG16_Weights, vgg16

    m = _load_torchvision(vgg16, VGG16_Weights.IMAGENET1K_V1, pretrained)
    # keep everything up to the penultimate 4096-d layer; drop the 1000-way classifier
    features = torch.nn.Sequential(m.features, m.avgpool, torch.nn.Flatten(), *m.classifier[:-1])
    return features, 4096


def _wide_resnet50(pretrained: bool):
    from torchvision.models import Wide_ResNet50_2_Weights, wide_resnet50_2

    m = _load_torchvision(wide_resnet50_2, Wide_ResNet50_2_Weights.IMAGENET1K_V1, pretrained)
    m.fc = torch.nn.Identity()
    return m, 2048


BackboneFactory = Callable[[bool], "tuple[torch.nn.Module, int]"]
BACKBONES: dict[str, BackboneFactory] = {"vgg16": _vgg16, "wide_resnet50": _wide_resnet50}


def register_backbone(name: str, factory: BackboneFactory) -> None:
    """Make ``factory(pretrained) -> (feature_module, feature_dim)`` available by name."""
    BACKBONES[name] = factory


class TransferClassifier(torch.nn.Module):
    """Frozen feature extractor followed by dense-relu-dropout-dense-log_softmax."""

    def __init__(self, features: torch.nn.Module, feature_dim: int, n_classes: int,
                 hidden_units: int = 512, dropout: float = 0.5):
        super().__init__()
        self.features = features
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.head = torch.nn.Sequential(
            torch.nn.Linear(feature_dim, hidden_units),
            torch.nn.ReLU(),
            torch.nn.Dropout(dropout),
            torch.nn.Linear(hidden_units, n_classes),
            torch.nn.LogSoftmax(dim=1),
        )

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen layers never update batch-norm statistics or apply dropout
        self.features.eval()
        return self

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.features(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


def build_classifier(
    backbone: str,
    n_classes: int = 10,
    pretrained: bool = True,
    hidden_units: int = 512,
    dropout: float = 0.5,
) -> TransferClassifier:
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
    features, dim = BACKBONES[backbone](pretrained)
    return TransferClassifier(features, dim, n_classes, hidden_units, dropout)


def count_parameters(model: torch.nn.Module) -> tuple[int, int]:
    """(trainable, frozen) parameter counts."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    return trainable, frozen


# --------------------------------------------------------------------------
# early stopping


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict improvement.

    Epochs are numbered from 1. Ties count as no improvement.
    """

    def __init__(self, patience: int = 3):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score`` for ``epoch``; returns True when training should stop."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def early_stopping_trace(scores: Sequence[float], patience: int = 3, max_epochs: int | None = None) -> dict:
    """Replay the stopping rule over a sequence of validation scores."""
    max_epochs = len(scores) if max_epochs is None else min(max_epochs, len(scores))
    stopper = EarlyStopping(patience)
    epochs_run, stopped = 0, False
    for epoch in range(1, max_epochs + 1):
        epochs_run = epoch
        if stopper.update(epoch, scores[epoch - 1]):
            stopped = True
            break
    return {
        "epochs_run": epochs_run,
        "best_epoch": stopper.best_epoch,
        "best_score": stopper.best_score,
        "stopped_early": stopped,
    }


# --------------------------------------------------------------------------
# configs and results


@dataclass
class ClassifierTrainConfig:
    backbone: str = "vgg16"
    use_geometric: bool = False
    max_epochs: int = 50
    patience: int = 3
    initial_lr: float = 1e-4
    lr_factor: float = 0.1
    lr_patience: int = 1
    min_lr: float = 1e-6
    batch_size: int = 32
    seed: int = 0
    pretrained: bool = True
    hidden_units: int = 512
    dropout: float = 0.5
    image_size: int = CLASSIFIER_IMAGE_SIZE

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")

    @property
    def fingerprint(self) -> str:
        return fingerprint({**asdict(self), "frozen": "all backbone layers"})


@dataclass
class ExperimentResult:
    config_fingerprint: str
    backbone: str
    augment: str
    dataset_variant: str
    seed: int
    epochs_run: int
    best_epoch: int
    best_val_accuracy: float
    stopped_early: bool
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)

    ROW_FIELDS = ("backbone", "augment", "variant", "epochs", "best_val_accuracy", "stopped_early")

    def to_row(self) -> dict:
        return {
            "backbone": self.backbone,
            "augment": self.augment,
            "variant": self.dataset_variant,
            "epochs": self.epochs_run,
            "best_val_accuracy": self.best_val_accuracy,
            "stopped_early": self.stopped_early,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(**d)


# --------------------------------------------------------------------------
# estimator


def _to_arrays(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray):
        return list(check_uint8_images(X, size=None))
    items = list(X)
    if items and isinstance(items[0], ImageRecord):
        return load_images(items)
    return [check_uint8_images(x, size=None)[0] for x in items]


def accuracy(y_true, y_pred) -> float:
    """Correct predictions divided by total predictions."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("accuracy of an empty split is undefined")
    if y_true.shape != y_pred.shape:
        raise ValueError("prediction and label counts differ")
    return int((y_true == y_pred).sum()) / len(y_true)


class LULCClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tune a frozen pretrained backbone's head on 8-bit RGB images.

    ``X`` is a sequence of :class:`ImageRecord`, a uint8 array
    ``(n, H, W, 3)`` or a list of such images; ``y`` holds class labels of any
    hashable type. Early stopping monitors accuracy on ``eval_set`` when given,
    otherwise on a stratified ``validation_fraction`` hold-out of ``X``.
    """

    def __init__(
        self,
        backbone="vgg16",
        use_geometric=False,
        max_epochs=50,
        patience=3,
        initial_lr=1e-4,
        lr_factor=0.1,
        lr_patience=1,
        min_lr=1e-6,
        batch_size=32,
        seed=0,
        pretrained=True,
        hidden_units=512,
        dropout=0.5,
        image_size=CLASSIFIER_IMAGE_SIZE,
        validation_fraction=0.25,
        augment_policy=None,
    ):
        self.backbone = backbone
        self.use_geometric = use_geometric
        self.max_epochs = max_epochs
        self.patience = patience
        self.initial_lr = initial_lr
        self.lr_factor = lr_factor
        self.lr_patience = lr_patience
        self.min_lr = min_lr
        self.batch_size = batch_size
        self.seed = seed
        self.pretrained = pretrained
        self.hidden_units = hidden_units
        self.dropout = dropout
        self.image_size = image_size
        self.validation_fraction = validation_fraction
        self.augment_policy = augment_policy

    @property
    def config(self) -> ClassifierTrainConfig:
        params = self.get_params()
        for extra in ("validation_fraction", "augment_policy"):
            params.pop(extra)
        return ClassifierTrainConfig(**params)

    def _batches(self, images, y, rng=None, augment=False):
        policy = self.augment_policy or AugmentPolicy()
        for start in range(0, len(images), self.batch_size):
            chunk = images[start : start + self.batch_size]
            batch = batch_from_arrays(
                chunk, None, rng=rng, use_geometric=augment, policy=policy, size=self.image_size
            )
            yield batch.data, None if y is None else torch.as_tensor(y[start : start + self.batch_size])

    def _embed_all(self, images) -> torch.Tensor:
        self.model_.eval()
        return torch.cat([self.model_.embed(x) for x, _ in self._batches(images, None)])

    def _head_pass(self, feats: torch.Tensor, y: torch.Tensor, optimizer=None) -> tuple[float, float]:
        logp = self.model_.head(feats)
        loss = F.nll_loss(logp, y)
        if optimizer is not None:
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        correct = int((logp.argmax(1) == y).sum())
        return float(loss.detach()) * len(y), correct

    def fit(self, X, y, eval_set=None, dataset_variant: str = "baseline"):
        cfg = self.config
        images = _to_arrays(X)
        y = check_labels(y, len(images))
        if len(images) == 0:
            raise ValueError("training split is empty")
        if eval_set is None:
            images, val_images, y, y_val = train_test_split(
                images, y, test_size=self.validation_fraction, stratify=y, random_state=self.seed % 2**32
            )
        else:
            val_images = _to_arrays(eval_set[0])
            y_val = check_labels(eval_set[1], len(val_images))
        if len(val_images) == 0:
            raise ValueError("validation split is empty")

        self.classes_ = np.unique(np.concatenate([np.asarray(y), np.asarray(y_val)]))
        y_idx = np.searchsorted(self.classes_, y)
        yv_idx = torch.as_tensor(np.searchsorted(self.classes_, y_val))

        torch.manual_seed(derive_seed(cfg.seed, "head-init"))
        self.model_ = build_classifier(
            cfg.backbone, len(self.classes_), cfg.pretrained, cfg.hidden_units, cfg.dropout
        )
        optimizer = torch.optim.Adam(self.model_.head.parameters(), lr=cfg.initial_lr)
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="max", factor=cfg.lr_factor, patience=cfg.lr_patience,
            threshold=0.0, min_lr=cfg.min_lr,
        )
        stopper = EarlyStopping(cfg.patience)
        val_feats = self._embed_all(val_images)
        # without augmentation the frozen backbone's outputs never change
        train_feats = None if cfg.use_geometric else self._embed_all(images)

        result = ExperimentResult(
            cfg.fingerprint, cfg.backbone, "geometric" if cfg.use_geometric else "none",
            dataset_variant, cfg.seed, 0, 0, 0.0, False,
        )
        best_state = None
        for epoch in range(1, cfg.max_epochs + 1):
            torch.manual_seed(derive_seed(cfg.seed, "epoch", epoch))
            order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch)).permutation(len(images))
            self.model_.train()
            total_loss = correct = 0.0
            if train_feats is None:
                aug_rng = np.random.default_rng(derive_seed(cfg.seed, "augment", epoch))
                shuffled = [images[i] for i in order]
                for x, yb in self._batches(shuffled, y_idx[order], aug_rng, augment=True):
                    l, c = self._head_pass(self.model_.embed(x), yb, optimizer)
                    total_loss += l
                    correct += c
            else:
                for start in range(0, len(order), cfg.batch_size):
                    idx = torch.as_tensor(order[start : start + cfg.batch_size])
                    l, c = self._head_pass(train_feats[idx], torch.as_tensor(y_idx)[idx], optimizer)
                    total_loss += l
                    correct += c

            self.model_.eval()
            with torch.no_grad():
                v_loss, v_correct = self._head_pass(val_feats, yv_idx)
            val_acc = v_correct / len(yv_idx)
            result.train_loss.append(total_loss / len(images))
            result.train_accuracy.append(correct / len(images))
            result.val_loss.append(v_loss / len(yv_idx))
            result.val_accuracy.append(val_acc)
            result.learning_rate.append(optimizer.param_groups[0]["lr"])
            logger.info("%s epoch %d val_acc=%.4f", cfg.backbone, epoch, val_acc)

            improved = val_acc > stopper.best_score
            stop = stopper.update(epoch, val_acc)
            if improved:
                best_state = {k: v.detach().clone() for k, v in self.model_.head.state_dict().items()}
            result.epochs_run = epoch
            if stop:
                result.stopped_early = True
                break
            scheduler.step(val_acc)

        self.model_.head.load_state_dict(best_state)
        self.model_.eval()
        result.best_epoch = stopper.best_epoch
        result.best_val_accuracy = float(stopper.best_score)
        self.result_ = result
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("LULCClassifier is not fitted yet; call fit first")

    def predict_log_proba(self, X) -> np.ndarray:
        self._check_fitted()
        images = _to_arrays(X)
        self.model_.eval()
        with torch.no_grad():
            out = [self.model_(x) for x, _ in self._batches(images, None)]
        return torch.cat(out).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self.predict_log_proba(X))

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return self.classes_[self.predict_log_proba(X).argmax(axis=1)]


def evaluate(model, X, y=None) -> float:
    """Accuracy of ``model.predict`` on a labelled split.

    ``X`` may be a list of :class:`ImageRecord` (labels taken from the records)
    or any input ``model.predict`` accepts together with ``y``.
    """
    items = list(X) if not isinstance(X, np.ndarray) else X
    if len(items) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if y is None:
        y = [r.label for r in items]
    return accuracy(y, model.predict(items))


def train_classifier(
    train_set: Sequence[ImageRecord],
    val_set: Sequence[ImageRecord],
    config: ClassifierTrainConfig,
    dataset_variant: str = "baseline",
    augment_policy: AugmentPolicy | None = None,
) -> ExperimentResult:
    """Fit a :class:`LULCClassifier` on record lists and return its run record."""
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be non-empty")
    overlap = {r.path for r in train_set} & {r.path for r in val_set}
    if overlap:
        raise ValueError(f"train and validation splits overlap ({len(overlap)} records)")
    clf = LULCClassifier(**asdict(config), augment_policy=augment_policy)
    clf.fit(
        list(train_set),
        [r.label for r in train_set],
        eval_set=(list(val_set), [r.label for r in val_set]),
        dataset_variant=dataset_variant,
    )
    return clf.result_
