import re

import numpy as np
import pytest
import torch
from PIL import Image
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lulc_gan import trainer as trainer_mod
from lulc_gan.datasets import ImageRecord, scan_dataset
from lulc_gan.networks import init_weights
from lulc_gan.trainer import (
    GanAugmenter,
    GanCheckpoint,
    GanTrainConfig,
    TrainingDivergedError,
    generate_images,
    generate_per_class,
    sample_grid,
    train_gan,
)
from lulc_gan.validation import derive_seed


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).integers(0, 256, (16, 64, 64, 3), dtype=np.uint8)


@pytest.fixture(scope="module")
def dcgan_ckpt(images):
    ckpt, _ = train_gan(images, GanTrainConfig("dcgan", epochs=1, batch_size=8, class_name="Forest"))
    return ckpt


def states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_config_defaults():
    cfg = GanTrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.beta1, cfg.beta2) == (300, 16, 2e-4, 0.5, 0.999)
    assert cfg.z_dim == 100 and GanTrainConfig("wgan-gp").z_dim == 128
    assert GanTrainConfig("wgan-gp").n_critic == 5


def test_large_batch_warns():
    with pytest.warns(UserWarning, match="batch_size"):
        GanTrainConfig(batch_size=32)


def test_config_validation():
    with pytest.raises(ValueError):
        GanTrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        GanTrainConfig(gan_kind="stylegan")


def test_zero_epochs_returns_initial_weights(images):
    cfg = GanTrainConfig("dcgan", epochs=0, seed=3)
    ckpt, history = train_gan(images, cfg)
    assert len(history) == 0 and ckpt.epoch == 0
    fresh = init_weights(cfg.generator_spec().build(), derive_seed(3, "init", "generator"))
    assert states_equal(ckpt.generator_state, fresh.state_dict())


def test_dcgan_alternates_one_to_one(images):
    _, history = train_gan(images, GanTrainConfig("dcgan", epochs=2, batch_size=8))
    assert history.step_log == "DG" * 4
    assert [r.epoch for r in history.records] == [1, 2]
    assert all(np.isfinite([r.g_loss, r.d_loss]).all() for r in history.records)


def test_wgan_runs_n_critic_steps_per_generator_step(images):
    _, history = train_gan(images, GanTrainConfig("wgan_gp", epochs=1, batch_size=8, n_critic=3))
    assert re.fullmatch(r"(DDDG)+", history.step_log)
    rec = history.records[0]
    assert (rec.critic_steps, rec.generator_steps) == (6, 2)


def test_empty_and_mislabelled_inputs_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        train_gan([], GanTrainConfig(epochs=1))
    recs = [ImageRecord("a.jpg", "Forest"), ImageRecord("b.jpg", "River")]
    with pytest.raises(ValueError, match="Forest"):
        train_gan(recs, GanTrainConfig(epochs=1, class_name="Forest"))


def test_non_finite_loss_aborts_with_diagnostics(images, monkeypatch):
    monkeypatch.setattr(
        trainer_mod.losses, "dcgan_generator_loss",
        lambda d_fake, conv: d_fake.mean() * float("nan"),
    )
    with pytest.raises(TrainingDivergedError) as info:
        train_gan(images, GanTrainConfig("dcgan", epochs=1, batch_size=8))
    assert np.isnan(info.value.g_loss) and np.isfinite(info.value.d_loss)


def test_resume_matches_uninterrupted_run(images, tmp_path):
    cfg = dict(gan_kind="dcgan", batch_size=8, seed=5, class_name="Forest", checkpoint_interval=1)
    full, _ = train_gan(images, GanTrainConfig(epochs=2, **cfg))
    train_gan(images, GanTrainConfig(epochs=1, **cfg), checkpoint_dir=tmp_path)
    mid = tmp_path / "Forest_dcgan_epoch0001.pt"
    assert mid.exists() and (tmp_path / "snapshots" / "Forest_dcgan_epoch0001.png").exists()
    resumed, history = train_gan(images, GanTrainConfig(epochs=2, **cfg), resume=mid)
    assert [r.epoch for r in history.records] == [2]
    assert states_equal(full.generator_state, resumed.generator_state)
    assert states_equal(full.discriminator_state, resumed.discriminator_state)


def test_checkpoint_round_trip(dcgan_ckpt, tmp_path):
    path = dcgan_ckpt.save(tmp_path / "g.pt")
    loaded = GanCheckpoint.load(path)
    z = torch.randn(3, 100, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(dcgan_ckpt.generator()(z), loaded.generator()(z))
    assert loaded.generator_optimizer["state"].keys() == dcgan_ckpt.generator_optimizer["state"].keys()
    assert loaded.epoch == 1 and loaded.class_name == "Forest"


def test_checkpoint_fingerprint_is_verified(dcgan_ckpt, tmp_path):
    path = dcgan_ckpt.save(tmp_path / "g.pt")
    payload = torch.load(path, weights_only=True)
    payload["generator_fingerprint"] = "0" * 16
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="fingerprint"):
        GanCheckpoint.load(tmp_path / "bad.pt")


def test_generate_images_contract(dcgan_ckpt, tmp_path):
    paths = generate_images(dcgan_ckpt, 5, seed=1, out_dir=tmp_path / "a")
    assert [p.name for p in paths] == [f"Forest_dcgan_{i:05d}.png" for i in range(5)]
    for p in paths:
        with Image.open(p) as img:
            assert img.mode == "RGB" and img.size == (64, 64)
            assert img.text == {"gan_kind": "dcgan", "checkpoint_epoch": "1", "seed": "1"}
            arr = np.asarray(img)
        assert arr.dtype == np.uint8 and arr.shape == (64, 64, 3)
    again = generate_images(dcgan_ckpt, 5, seed=1, out_dir=tmp_path / "b")
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]
    assert generate_images(dcgan_ckpt, 0, out_dir=tmp_path / "c") == []
    assert not (tmp_path / "c").exists()


def test_generate_rejects_unwritable_dir(dcgan_ckpt, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_images(dcgan_ckpt, 1, out_dir=blocker / "sub")


def test_generate_per_class_layout(dcgan_ckpt, tmp_path):
    root = generate_per_class([dcgan_ckpt], tmp_path, count=3)
    assert sorted(p.name for p in (root / "Forest").iterdir()) == [f"Forest_dcgan_{i:05d}.png" for i in range(3)]


def test_sample_grid_shapes_and_determinism(images):
    ckpts = [
        train_gan(images, GanTrainConfig("dcgan", epochs=0, seed=s, class_name=f"c{s}"))[0]
        for s in range(10)
    ]
    assert sample_grid(ckpts[0], 1, 1, seed=0).shape == (64, 64, 3)
    grid = sample_grid(ckpts, 2, 5, seed=4)
    assert grid.shape == (128, 320, 3) and grid.dtype == np.uint8
    assert np.array_equal(grid, sample_grid(ckpts, 2, 5, seed=4))
    # one cell per checkpoint: every tile differs
    tiles = [grid[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64] for r in range(2) for c in range(5)]
    assert len({t.tobytes() for t in tiles}) == 10
    with pytest.raises(ValueError):
        sample_grid(ckpts[0], 0, 3)


def test_training_from_records(corpus_factory):
    index = scan_dataset(corpus_factory(classes=["Forest"], per_class=8))
    ckpt, history = train_gan(list(index.records), GanTrainConfig("dcgan", epochs=1, batch_size=4, class_name="Forest"))
    assert history.step_log == "DG" * 2
    out = ckpt.generator()(torch.randn(2, 100))
    assert out.min() >= -1 and out.max() <= 1


def test_history_csv(images, tmp_path):
    _, history = train_gan(images, GanTrainConfig("dcgan", epochs=2, batch_size=8))
    lines = history.to_csv(tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,g_loss,d_loss,seconds"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2"]


def test_estimator_api(images):
    est = GanAugmenter(epochs=1, batch_size=8, class_name="Forest")
    assert est.get_params()["epochs"] == 1
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.sample(2)
    assert est.fit(images) is est
    samples = est.sample(3, random_state=1)
    assert samples.shape == (3, 64, 64, 3) and samples.dtype == np.uint8
    assert np.array_equal(samples, est.sample(3, random_state=1))
