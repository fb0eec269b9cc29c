"""Per-class adversarial training, checkpointing and image export."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo
from sklearn.base import BaseEstimator

from . import losses
from .datasets import ImageRecord, denormalize, load_gan_images, normalize_gan
from .networks import (
    DEFAULT_Z_DIM,
    DISCRIMINATOR_BUILDERS,
    GENERATOR_BUILDERS,
    NetworkSpec,
    SpecNetwork,
    init_weights,
)
from .validation import GAN_IMAGE_SIZE, check_unit_signed, derive_seed

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GAN_KINDS = ("dcgan", "wgan_gp")
MAX_RECOMMENDED_BATCH = 16


def canonical_kind(gan_kind: str) -> str:
    kind = gan_kind.replace("-", "_").lower()
    if kind not in GAN_KINDS:
        raise ValueError(f"gan_kind must be one of {GAN_KINDS}, got {gan_kind!r}")
    return kind


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, step: int, g_loss: float, d_loss: float):
        self.epoch, self.step, self.g_loss, self.d_loss = epoch, step, g_loss, d_loss
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step}: g_loss={g_loss}, d_loss={d_loss}"
        )


@dataclass
class GanTrainConfig:
    gan_kind: str = "dcgan"
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_critic: int = 5
    lambda_gp: float = 10.0
    seed: int = 0
    class_name: str = ""
    z_dim: int | None = None
    checkpoint_interval: int = 50
    critic_dropout: float = 0.3

    def __post_init__(self):
        self.gan_kind = canonical_kind(self.gan_kind)
        if self.z_dim is None:
            self.z_dim = DEFAULT_Z_DIM[self.gan_kind]
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.n_critic < 1:
            raise ValueError("n_critic must be at least 1")
        if self.batch_size > MAX_RECOMMENDED_BATCH:
            warnings.warn(
                f"batch_size {self.batch_size} > {MAX_RECOMMENDED_BATCH} tends to let the "
                "discriminator overpower the generator",
                UserWarning,
                stacklevel=3,
            )

    def generator_spec(self) -> NetworkSpec:
        return GENERATOR_BUILDERS[self.gan_kind](self.z_dim)

    def discriminator_spec(self) -> NetworkSpec:
        if self.gan_kind == "wgan_gp":
            return DISCRIMINATOR_BUILDERS["wgan_gp"](self.critic_dropout)
        return DISCRIMINATOR_BUILDERS["dcgan"]()


@dataclass
class EpochRecord:
    epoch: int
    g_loss: float
    d_loss: float
    seconds: float
    critic_steps: int
    generator_steps: int
    snapshots: list[str] = field(default_factory=list)


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    # one character per optimizer step: "D" discriminator/critic, "G" generator
    step_log: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "g_loss", "d_loss", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.g_loss), repr(r.d_loss), f"{r.seconds:.3f}"])
        return path


@dataclass
class GanCheckpoint:
    config: dict
    generator_spec: dict
    discriminator_spec: dict
    generator_state: dict
    discriminator_state: dict
    generator_optimizer: dict
    discriminator_optimizer: dict
    epoch: int
    version: int = CHECKPOINT_VERSION

    @property
    def gan_kind(self) -> str:
        return self.config["gan_kind"]

    @property
    def class_name(self) -> str:
        return self.config["class_name"]

    @property
    def z_dim(self) -> int:
        return self.config["z_dim"]

    @property
    def generator_fingerprint(self) -> str:
        return NetworkSpec.from_dict(self.generator_spec).fingerprint

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = asdict(self)
        payload["generator_fingerprint"] = self.generator_fingerprint
        payload["discriminator_fingerprint"] = NetworkSpec.from_dict(
            self.discriminator_spec
        ).fingerprint
        torch.save(payload, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GanCheckpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        stored_g = payload.pop("generator_fingerprint")
        stored_d = payload.pop("discriminator_fingerprint")
        ckpt = cls(**payload)
        config = GanTrainConfig(**{**ckpt.config, "batch_size": 1})
        expected_g = config.generator_spec().fingerprint
        if not (stored_g == ckpt.generator_fingerprint == expected_g):
            raise ValueError(f"{path}: generator fingerprint does not match a known spec")
        if stored_d != config.discriminator_spec().fingerprint:
            raise ValueError(f"{path}: discriminator fingerprint mismatch")
        return ckpt

    def generator(self) -> SpecNetwork:
        net = NetworkSpec.from_dict(self.generator_spec).build()
        net.load_state_dict(self.generator_state)
        return net.eval()

    def discriminator(self) -> SpecNetwork:
        net = NetworkSpec.from_dict(self.discriminator_spec).build()
        net.load_state_dict(self.discriminator_state)
        return net.eval()


def _as_checkpoint(checkpoint) -> GanCheckpoint:
    return checkpoint if isinstance(checkpoint, GanCheckpoint) else GanCheckpoint.load(checkpoint)


def _clone_state(state: dict) -> dict:
    # optimizer state dicts nest tensors inside plain containers
    if isinstance(state, dict):
        return {k: _clone_state(v) for k, v in state.items()}
    if isinstance(state, list):
        return [_clone_state(v) for v in state]
    if isinstance(state, torch.Tensor):
        return state.detach().clone()
    return state


def _snapshot(config, G, D, optG, optD, epoch) -> GanCheckpoint:
    return GanCheckpoint(
        config=asdict(config),
        generator_spec=G.spec.to_dict(),
        discriminator_spec=D.spec.to_dict(),
        generator_state=_clone_state(G.state_dict()),
        discriminator_state=_clone_state(D.state_dict()),
        generator_optimizer=_clone_state(optG.state_dict()),
        discriminator_optimizer=_clone_state(optD.state_dict()),
        epoch=epoch,
    )


def _images_tensor(images, class_name: str) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return check_unit_signed(images.to(torch.float32))
    if isinstance(images, np.ndarray):
        return normalize_gan(images if images.ndim == 4 else images[None])
    records = list(images)
    if not records:
        raise ValueError("cannot train a GAN on an empty image set")
    if isinstance(records[0], ImageRecord):
        labels = {r.label for r in records}
        if class_name and labels != {class_name}:
            raise ValueError(f"expected only {class_name!r} images, got labels {sorted(labels)}")
        return load_gan_images(records)
    return normalize_gan(np.asarray(records))


def _all_finite(*nets: torch.nn.Module) -> bool:
    return all(torch.isfinite(p).all() for net in nets for p in net.parameters())


def train_gan(
    images,
    config: GanTrainConfig,
    checkpoint_dir: str | Path | None = None,
    resume: GanCheckpoint | str | Path | None = None,
) -> tuple[GanCheckpoint, TrainHistory]:
    """Train one generator on the images of a single class.

    ``images`` may be a list of :class:`ImageRecord`, a uint8 array of
    ``(n, 64, 64, 3)`` images, or an already normalized ``(n, 3, 64, 64)``
    tensor. Each epoch derives its own shuffle, noise and dropout seeds from
    ``config.seed``, so a run resumed from an epoch checkpoint continues
    exactly as an uninterrupted run would.
    """
    X = _images_tensor(images, config.class_name)
    n = len(X)
    if n == 0:
        raise ValueError("cannot train a GAN on an empty image set")
    kind = config.gan_kind
    lcfg = losses.LossConfig(config.lambda_gp, "minimization")

    G = config.generator_spec().build()
    D = config.discriminator_spec().build()
    init_weights(G, derive_seed(config.seed, "init", "generator"))
    init_weights(D, derive_seed(config.seed, "init", "discriminator"))
    betas = (config.beta1, config.beta2)
    optG = torch.optim.Adam(G.parameters(), lr=config.learning_rate, betas=betas)
    optD = torch.optim.Adam(D.parameters(), lr=config.learning_rate, betas=betas)

    start_epoch = 0
    if resume is not None:
        ckpt = _as_checkpoint(resume)
        if ckpt.gan_kind != kind or ckpt.z_dim != config.z_dim:
            raise ValueError("resume checkpoint was trained with a different architecture")
        G.load_state_dict(ckpt.generator_state)
        D.load_state_dict(ckpt.discriminator_state)
        optG.load_state_dict(ckpt.generator_optimizer)
        optD.load_state_dict(ckpt.discriminator_optimizer)
        start_epoch = ckpt.epoch

    history = TrainHistory()
    steps: list[str] = []
    n_batches = max(n // config.batch_size, 1)
    batch = min(config.batch_size, n)
    G.train()
    D.train()

    for epoch in range(start_epoch, config.epochs):
        tic = time.perf_counter()
        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(n)
        noise = torch.Generator().manual_seed(derive_seed(config.seed, "noise", epoch))
        torch.manual_seed(derive_seed(config.seed, "dropout", epoch))
        g_losses, d_losses = [], []
        d_steps = g_steps = 0

        for b in range(n_batches):
            real = X[torch.from_numpy(order[b * batch : (b + 1) * batch])]
            try:
                if kind == "dcgan":
                    fake = G(torch.randn(len(real), config.z_dim, generator=noise))
                    d_loss = losses.dcgan_discriminator_loss(
                        D(real), D(fake.detach()), "minimization"
                    )
                    optD.zero_grad()
                    d_loss.backward()
                    optD.step()
                    d_steps += 1
                    steps.append("D")
                else:
                    for _ in range(config.n_critic):
                        with torch.no_grad():
                            fake = G(torch.randn(len(real), config.z_dim, generator=noise))
                        penalty = losses.gradient_penalty(
                            D, losses.GpSample.draw(real, fake, noise), lcfg
                        )
                        d_loss = losses.wgan_critic_loss(D(real), D(fake), penalty)
                        optD.zero_grad()
                        d_loss.backward()
                        optD.step()
                        d_steps += 1
                        steps.append("D")
                d_losses.append(d_loss.item())

                fake = G(torch.randn(len(real), config.z_dim, generator=noise))
                if kind == "dcgan":
                    g_loss = losses.dcgan_generator_loss(D(fake), "minimization")
                else:
                    g_loss = losses.wgan_generator_loss(D(fake))
                optG.zero_grad()
                g_loss.backward()
                optG.step()
                g_steps += 1
                steps.append("G")
                g_losses.append(g_loss.item())
            except ValueError as exc:
                # a loss refusing its input after parameters blew up is divergence too
                if not _all_finite(G, D):
                    raise TrainingDivergedError(
                        epoch + 1, b, g_losses[-1] if g_losses else float("nan"),
                        d_losses[-1] if d_losses else float("nan"),
                    ) from exc
                raise

            if not (np.isfinite(g_losses[-1]) and np.isfinite(d_losses[-1])):
                raise TrainingDivergedError(epoch + 1, b, g_losses[-1], d_losses[-1])

        done = epoch + 1
        record = EpochRecord(
            done,
            float(np.mean(g_losses)),
            float(np.mean(d_losses)),
            time.perf_counter() - tic,
            d_steps,
            g_steps,
        )
        if checkpoint_dir is not None and (
            done % config.checkpoint_interval == 0 or done == config.epochs
        ):
            ckpt = _snapshot(config, G, D, optG, optD, done)
            stem = f"{config.class_name or 'all'}_{kind}_epoch{done:04d}"
            ckpt.save(Path(checkpoint_dir) / f"{stem}.pt")
            grid_path = Path(checkpoint_dir) / "snapshots" / f"{stem}.png"
            grid_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(sample_grid(ckpt, 4, 4, seed=config.seed)).save(grid_path)
            record.snapshots.append(str(grid_path))
        history.records.append(record)
        logger.info(
            "%s %s epoch %d/%d g_loss=%.4f d_loss=%.4f",
            config.class_name, kind, done, config.epochs, record.g_loss, record.d_loss,
        )

    history.step_log = "".join(steps)
    return _snapshot(config, G, D, optG, optD, max(config.epochs, start_epoch)), history


def _generate(checkpoint: GanCheckpoint, count: int, seed: int, chunk: int = 64) -> np.ndarray:
    G = checkpoint.generator()
    z = torch.randn(count, checkpoint.z_dim, generator=torch.Generator().manual_seed(seed))
    out = []
    with torch.no_grad():
        for start in range(0, count, chunk):
            out.append(G(z[start : start + chunk]))
    if not out:
        return np.empty((0, GAN_IMAGE_SIZE, GAN_IMAGE_SIZE, 3), dtype=np.uint8)
    return denormalize(torch.cat(out))


def generate_images(
    checkpoint: GanCheckpoint | str | Path,
    count: int = 256,
    seed: int = 0,
    out_dir: str | Path = ".",
) -> list[Path]:
    """Write ``count`` 64x64 PNGs named ``<class>_<gan_kind>_<00000>.png``."""
    ckpt = _as_checkpoint(checkpoint)
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc
    images = _generate(ckpt, count, seed)
    # provenance travels with each file: which checkpoint epoch and noise seed produced it
    info = PngInfo()
    info.add_text("gan_kind", ckpt.gan_kind)
    info.add_text("checkpoint_epoch", str(ckpt.epoch))
    info.add_text("seed", str(seed))
    paths = []
    for i, img in enumerate(images):
        path = out_dir / f"{ckpt.class_name}_{ckpt.gan_kind}_{i:05d}.png"
        Image.fromarray(img, mode="RGB").save(path, format="PNG", pnginfo=info)
        paths.append(path)
    logger.info("wrote %d images to %s (checkpoint epoch %d)", count, out_dir, ckpt.epoch)
    return paths


def sample_grid(checkpoints, rows: int, cols: int, seed: int = 0) -> np.ndarray:
    """Montage of ``rows * cols`` samples as a uint8 ``(rows*64, cols*64, 3)`` array.

    With several checkpoints, cell ``i`` (row-major) is drawn from checkpoint
    ``i % len(checkpoints)``, e.g. one sample per class for ten per-class
    generators on a 2x5 grid.
    """
    if rows * cols < 1:
        raise ValueError("grid needs at least one cell")
    if isinstance(checkpoints, (GanCheckpoint, str, Path)):
        checkpoints = [checkpoints]
    ckpts = [_as_checkpoint(c) for c in checkpoints]
    n = rows * cols
    per_ckpt = [
        _generate(c, len(range(j, n, len(ckpts))), derive_seed(seed, "grid", j))
        for j, c in enumerate(ckpts)
    ]
    size = GAN_IMAGE_SIZE
    grid = np.zeros((rows * size, cols * size, 3), dtype=np.uint8)
    for i in range(n):
        j = i % len(ckpts)
        img = per_ckpt[j][i // len(ckpts)]
        r, c = divmod(i, cols)
        grid[r * size : (r + 1) * size, c * size : (c + 1) * size] = img
    return grid


class GanAugmenter(BaseEstimator):
    """Estimator wrapper: ``fit`` trains a per-class generator, ``sample`` draws images.

    Parameters mirror :class:`GanTrainConfig`. After fitting, ``checkpoint_``
    and ``history_`` hold the trained state and the per-epoch losses.
    """

    def __init__(
        self,
        gan_kind="dcgan",
        epochs=300,
        batch_size=16,
        learning_rate=2e-4,
        beta1=0.5,
        beta2=0.999,
        n_critic=5,
        lambda_gp=10.0,
        seed=0,
        class_name="",
        z_dim=None,
        checkpoint_interval=50,
        checkpoint_dir=None,
    ):
        self.gan_kind = gan_kind
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.n_critic = n_critic
        self.lambda_gp = lambda_gp
        self.seed = seed
        self.class_name = class_name
        self.z_dim = z_dim
        self.checkpoint_interval = checkpoint_interval
        self.checkpoint_dir = checkpoint_dir

    def _config(self) -> GanTrainConfig:
        params = self.get_params()
        params.pop("checkpoint_dir")
        return GanTrainConfig(**params)

    def fit(self, X, y=None):
        self.checkpoint_, self.history_ = train_gan(
            X, self._config(), checkpoint_dir=self.checkpoint_dir
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("GanAugmenter is not fitted yet; call fit first")

    def sample(self, n_samples: int, random_state: int = 0) -> np.ndarray:
        """``n_samples`` generated images as uint8 ``(n, 64, 64, 3)``."""
        self._check_fitted()
        return _generate(self.checkpoint_, n_samples, random_state)

    def generate(self, out_dir, count: int = 256, random_state: int = 0) -> list[Path]:
        self._check_fitted()
        return generate_images(self.checkpoint_, count, random_state, out_dir)


def generate_per_class(
    checkpoints: Sequence[GanCheckpoint | str | Path],
    out_root: str | Path,
    count: int = 256,
    seed: int = 0,
) -> Path:
    """Export ``count`` images per checkpoint into ``out_root/<class>/``."""
    out_root = Path(out_root)
    for ckpt in map(_as_checkpoint, checkpoints):
        generate_images(ckpt, count, derive_seed(seed, ckpt.class_name), out_root / ckpt.class_name)
    return out_root
