import numpy as np
import pytest

from mpdit.config import TrainConfig, preset
from mpdit.ema import SnapshotStore
from mpdit.optim import NonFiniteGradientError, max_row_norm_deviation
from mpdit.train import (
    Trainer,
    TrainingDiverged,
    diffusion_loss,
    load_checkpoint,
    load_model,
    save_checkpoint,
    training_step,
)


def small_train(**kw):
    base = dict(steps=10, batch_size=8, lr=1e-2, warmup=2, decay_start=0, ema_sigma_rels=(0.05, 0.10), snapshot_interval=2)
    base.update(kw)
    return TrainConfig(**base)


def test_same_batch_same_seed_same_loss(tiny_cfg):
    a = Trainer(tiny_cfg, small_train(seed=4))
    b = Trainer(tiny_cfg, small_train(seed=4))
    batch = Trainer(tiny_cfg, small_train(seed=11)).next_batch()
    assert a.training_step(batch)[0] == b.training_step(batch)[0]
    # and the internally drawn batches agree too
    assert [a.training_step()[0] for _ in range(3)] == [b.training_step()[0] for _ in range(3)]


def test_different_seeds_diverge(tiny_cfg):
    a = Trainer(tiny_cfg, small_train(seed=0))
    b = Trainer(tiny_cfg, small_train(seed=1))
    assert a.training_step()[0] != b.training_step()[0]


def test_initial_loss_is_noise_variance(tiny_cfg):
    trainer = Trainer(tiny_cfg, small_train(batch_size=256, dtype="float64"))
    x0, y, t, noise = trainer.next_batch()
    loss = float(diffusion_loss(trainer.model, x0, y, t, noise).data)
    # zero output head: loss is exactly the mean squared noise
    assert loss == pytest.approx(float(np.mean(noise**2)), rel=1e-12)
    assert loss == pytest.approx(1.0, abs=0.05)


def test_labels_are_dropped_at_the_configured_rate(tiny_cfg):
    trainer = Trainer(preset("E", width=16, depth=1, heads=2, image_size=4, num_classes=3), small_train(batch_size=4000))
    _, y, t, _ = trainer.next_batch()
    frac = np.mean(y == trainer.model.null_label)
    assert abs(frac - 0.1) < 0.02
    assert t.min() >= 1 and t.max() <= trainer.model_cfg.diffusion_steps


def test_loss_decreases_briefly(tiny_cfg):
    trainer = Trainer(tiny_cfg, small_train(seed=2, batch_size=16))
    losses = [trainer.training_step()[0] for _ in range(40)]
    assert np.mean(losses[-10:]) < np.mean(losses[:5])


def test_non_finite_loss_halts_with_diagnostics(tiny_cfg):
    trainer = Trainer(tiny_cfg, small_train())
    x0, y, t, noise = trainer.next_batch()
    x0 = x0.copy()
    x0[0, 0, 0, 0] = np.nan
    before = {k: v.copy() for k, v in trainer.model.state_dict().items()}
    with pytest.raises(TrainingDiverged) as info:
        trainer.training_step((x0, y, t, noise))
    err = info.value
    assert err.step == 1 and "diverged at step 1" in str(err)
    assert any(k.startswith("param/") for k in err.diagnostics)
    assert np.isnan(err.diagnostics["input/x_t"])
    assert trainer.step == 0
    for k, v in trainer.model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_non_finite_gradient_halts(tiny_cfg, monkeypatch):
    trainer = Trainer(tiny_cfg, small_train())
    p = trainer.model.parameters()[0]

    def poison(*args, **kwargs):
        raise NonFiniteGradientError(f"gradient of {p.shape} is not finite")

    monkeypatch.setattr(trainer.optimizer, "step", poison)
    with pytest.raises(TrainingDiverged, match="not finite"):
        trainer.training_step()


def test_forced_normalization_each_step():
    cfg = preset("D", width=16, depth=1, heads=2, image_size=8, num_classes=3, diffusion_steps=32)
    trainer = Trainer(cfg, small_train(lr=0.1))
    for _ in range(5):
        trainer.training_step()
        assert max_row_norm_deviation(trainer.model) < 1e-6


def test_ema_and_snapshots_are_written(tiny_cfg, tmp_path):
    trainer = Trainer(tiny_cfg, small_train(), snapshot_dir=tmp_path / "snaps")
    for _ in range(6):
        training_step(trainer)
    assert all(e.t == 6 for e in trainer.emas)
    store = SnapshotStore.load(tmp_path / "snaps")
    assert sorted({r.step for r in store.records}) == [2, 4, 6]
    assert len(store) == 6 and "config" in store.meta
    ema = trainer.ema_state_dict(1)
    assert set(ema) == set(trainer.model.state_dict())


def test_checkpoint_round_trip(tiny_cfg, tmp_path):
    trainer = Trainer(tiny_cfg, small_train(seed=9))
    trainer.training_step()
    path = tmp_path / "ck.npz"
    save_checkpoint(path, tiny_cfg, trainer.model.state_dict(), trainer.train_cfg)
    cfg, tc, state = load_checkpoint(path)
    assert cfg == tiny_cfg and tc == trainer.train_cfg
    for k, v in trainer.model.state_dict().items():
        assert np.array_equal(state[k], v) and state[k].dtype == v.dtype
    model = load_model(path)
    x = np.ones((1, 1, 8, 8))
    np.testing.assert_array_equal(model(x, 5, 1).data, trainer.model(x, 5, 1).data)
    assert not list(tmp_path.glob("*.tmp"))


def test_resume_from_state(tiny_cfg):
    a = Trainer(tiny_cfg, small_train(seed=1))
    a.training_step()
    b = Trainer(tiny_cfg, small_train(seed=3), init_state=a.model.state_dict())
    # forced normalization re-projects the loaded rows, which moves them by rounding only
    for k, v in a.model.state_dict().items():
        np.testing.assert_allclose(b.model.state_dict()[k], v, rtol=1e-6, atol=1e-7)


def test_bad_checkpoints_are_rejected(tiny_cfg, tmp_path):
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a zip archive")
    with pytest.raises(ValueError, match="not a readable checkpoint"):
        load_checkpoint(junk)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "missing.npz")
    bare = tmp_path / "bare.npz"
    np.savez(bare, w=np.ones(2))
    with pytest.raises(ValueError, match="missing config header"):
        load_checkpoint(bare)
    with pytest.raises(ValueError, match="reserved"):
        save_checkpoint(tmp_path / "x.npz", tiny_cfg, {"__config__": np.ones(1)})
