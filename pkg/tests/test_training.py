import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gbmseg.augment import AugmentConfig
from gbmseg.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from gbmseg.dataset import scan_dataset, split_manifest
from gbmseg.errors import (CheckpointCorrupt, CheckpointSpecMismatch, CheckpointVersionError,
                           ConfigurationError, PreconditionError, TrainingError, ValidationError)
from gbmseg.models import ModelSpec, build_model, build_unet, forward
from gbmseg.synthetic import blob_dataset, write_dataset_tree
from gbmseg.training import (AdamState, EpochRecord, TrainConfig, TrainHistory, adam_step, bce_loss,
                             fine_tune, fine_tune_arrays, fit, segmentation_loss, train)

MICRO = ModelSpec(arch="unet", task="classify", base_channels=8, depth=2, input_side=32)
OVERFIT = TrainConfig(epochs=200, batch_size=8, augment=None, target_train_accuracy=1.0)


@pytest.fixture(scope="module")
def overfit_model():
    x, y = blob_dataset(8, 32, seed=0)
    model, hist = fit(build_unet(MICRO, seed=0), x, y, config=OVERFIT)
    return model, hist, x, y


# losses

def test_bce_symmetric_point():
    for y in (0.0, 1.0):
        assert float(bce_loss(torch.tensor([[0.5]]), torch.tensor([[y]]))) == pytest.approx(math.log(2), abs=1e-7)


def test_bce_perfect_prediction():
    y = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    assert float(bce_loss(y.clone(), y)) <= 1.2e-7


def test_bce_hand_value():
    assert float(bce_loss(torch.tensor([[0.9]], dtype=torch.float64), torch.tensor([[1.0]]))) == \
        pytest.approx(-math.log(0.9), abs=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ValidationError):
        bce_loss(torch.zeros(3, 1), torch.zeros(3))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers(0, 2**20))
def test_bce_non_negative(ps, bits):
    ys = [(bits >> i) & 1 for i in range(len(ps))]
    assert float(bce_loss(torch.tensor(ps, dtype=torch.float64)[:, None],
                          torch.tensor(ys, dtype=torch.float64)[:, None])) >= 0


@pytest.mark.parametrize("classes", [2, 4, 7])
def test_uniform_logits_give_log_classes(classes):
    logits = torch.zeros(2, classes, 5, 5, dtype=torch.float64)
    masks = torch.randint(0, classes, (2, 5, 5))
    assert float(segmentation_loss(logits, masks)) == pytest.approx(math.log(classes), abs=1e-12)


# Adam

def test_adam_zero_gradient_fixed_point():
    params = {"w": torch.tensor([1.0, -2.0])}
    new, _ = adam_step(params, {"w": torch.zeros(2)}, AdamState(), TrainConfig(), 1)
    assert torch.equal(new["w"], params["w"])


def test_adam_first_step_by_hand():
    new, state = adam_step({"t": torch.tensor(1.0, dtype=torch.float64)},
                           {"t": torch.tensor(2.0, dtype=torch.float64)}, AdamState(),
                           TrainConfig(learning_rate=0.1), 1)
    assert float(new["t"]) == pytest.approx(1 - 0.1 * 2 / (2 + 1e-8), abs=1e-15)
    assert state.t == 1


def test_adam_descends_quadratic():
    theta = torch.tensor(1.0, dtype=torch.float64)
    state = AdamState()
    cfg = TrainConfig(learning_rate=0.1)
    for t in range(1, 101):
        (theta,), state = (lambda r: ((r[0]["t"],), r[1]))(adam_step({"t": theta}, {"t": 2 * theta}, state, cfg, t))
    assert abs(float(theta)) < 0.5


def test_adam_matches_torch_optimizer():
    gen = torch.Generator().manual_seed(0)
    w0 = torch.randn(5, dtype=torch.float64, generator=gen)
    grads = [torch.randn(5, dtype=torch.float64, generator=gen) for _ in range(20)]
    ref = w0.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    ours = {"w": w0.clone()}
    state = AdamState()
    cfg = TrainConfig(learning_rate=0.01)
    for t, g in enumerate(grads, start=1):
        ref.grad = g.clone()
        opt.step()
        ours, state = adam_step(ours, {"w": g}, state, cfg, t)
    assert torch.allclose(ours["w"], ref.detach(), rtol=0, atol=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_adam_zero_lr_is_identity(values):
    p = {"w": torch.tensor(values, dtype=torch.float64)}
    g = {"w": torch.ones(len(values), dtype=torch.float64)}
    new, _ = adam_step(p, g, AdamState(), TrainConfig(learning_rate=0.0), 1)
    assert torch.equal(new["w"], p["w"])


def test_adam_names_non_finite_parameter():
    with pytest.raises(TrainingError, match="'dec.bias'"):
        adam_step({"dec.bias": torch.zeros(2)}, {"dec.bias": torch.tensor([0.0, float("inf")])},
                  AdamState(), TrainConfig(), 1)
    with pytest.raises(ValidationError):
        adam_step({}, {}, AdamState(), TrainConfig(), 0)


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(adam_epsilon=0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epochs": 1, "momentum": 0.9})
    cfg = TrainConfig.from_dict({"epochs": 3, "augment": {"rotation_max_deg": 5}})
    assert cfg.augment.rotation_max_deg == 5


# fitting

def test_epochs_zero_returns_model_unchanged():
    x, y = blob_dataset(2, 32)
    model = build_unet(MICRO)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    model2, hist = fit(model, x, y, config=TrainConfig(epochs=0))
    assert model2 is model and len(hist) == 0
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_overfit_reaches_full_accuracy(overfit_model):
    model, hist, x, y = overfit_model
    assert hist.records[-1].train_acc == 1.0
    assert len(hist) <= 200
    assert model.trained_epochs == len(hist)


def test_training_is_deterministic():
    x, y = blob_dataset(4, 32, seed=1)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=5)
    runs = [fit(build_unet(MICRO, seed=2), x[:6], y[:6], x[6:], y[6:], config=cfg)[1] for _ in range(2)]
    assert runs[0].records[-1].val_loss == runs[1].records[-1].val_loss
    assert runs[0].to_csv() == runs[1].to_csv()


def test_loss_keeps_improving_over_windows():
    x, y = blob_dataset(8, 32, seed=0)
    cfg = TrainConfig(epochs=80, batch_size=8, augment=None)
    _, hist = fit(build_unet(MICRO, seed=0), x, y, config=cfg)
    losses = hist.column("train_loss")
    first = min(losses[:20])
    for k in range(40, len(losses) - 19):
        assert min(losses[k:k + 20]) < first


def test_fine_tune_low_lr_keeps_accuracy(overfit_model):
    model, _, x, y = overfit_model
    hist = TrainHistory()
    _, hist = fine_tune_arrays(model, x, y, config=TrainConfig(epochs=5, batch_size=8, augment=None),
                               config_delta={"learning_rate": 1e-4}, history=hist)
    assert all(r.phase == "fine_tune" for r in hist.records)
    assert hist.records[-1].train_acc == 1.0


def test_fine_tune_requires_trained_model():
    x, y = blob_dataset(2, 32)
    with pytest.raises(PreconditionError):
        fine_tune_arrays(build_unet(MICRO), x, y, config=TrainConfig(epochs=1))


def test_fine_tune_rejects_unknown_delta(overfit_model):
    model, _, x, y = overfit_model
    with pytest.raises(ConfigurationError):
        fine_tune_arrays(model, x, y, config=TrainConfig(epochs=1), config_delta={"topology": "bigger"})


def test_online_augmentation_keeps_masks_aligned():
    from gbmseg.synthetic import disk_dataset
    x, m = disk_dataset(4, 32)
    spec = ModelSpec(arch="unet", task="segment", base_channels=4, depth=2, input_side=32)
    _, hist = fit(build_unet(spec), x, m, config=TrainConfig(epochs=2, batch_size=2, augment=AugmentConfig()))
    assert len(hist) == 2 and all(math.isfinite(v) for v in hist.column("train_loss"))


def test_checkpoints_written_each_epoch(tmp_path):
    x, y = blob_dataset(2, 32)
    cfg = TrainConfig(epochs=2, batch_size=4, checkpoint_dir=tmp_path)
    model, _ = fit(build_unet(MICRO), x, y, x, y, config=cfg)
    assert load_checkpoint(tmp_path / "last.ckpt").trained_epochs == 2
    assert (tmp_path / "best.ckpt").exists()


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(tmp_path):
    x, y = blob_dataset(2, 32)
    model, _ = fit(build_unet(MICRO), x, y, config=TrainConfig(epochs=2, batch_size=4, checkpoint_dir=tmp_path))
    before = (tmp_path / "last.ckpt").read_bytes()
    bad = x.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError):
        fit(model, bad, y, config=TrainConfig(epochs=2, batch_size=4, augment=None, checkpoint_dir=tmp_path))
    assert (tmp_path / "last.ckpt").read_bytes() == before
    assert load_checkpoint(tmp_path / "last.ckpt").trained_epochs == 2


# manifest-driven training

@pytest.fixture
def tiny_manifest(tmp_path):
    root = write_dataset_tree(tmp_path / "data", 10, 10, side=32, seed=3)
    return split_manifest(scan_dataset(root), (0.6, 0.2, 0.2), seed=0)


def test_train_on_manifest(tiny_manifest, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=4, augment=None, checkpoint_dir=tmp_path / "ck")
    model, hist = train(build_unet(MICRO), tiny_manifest, cfg)
    assert [r.epoch for r in hist.records] == [1, 2]
    assert all(r.val_loss is not None for r in hist.records)
    model, hist = fine_tune(model, tiny_manifest, cfg, {"learning_rate": 1e-4}, history=hist)
    assert [r.phase for r in hist.records] == ["train", "train", "fine_tune", "fine_tune"]
    assert [r.epoch for r in hist.records] == [1, 2, 3, 4]


def test_train_epochs_zero_on_manifest(tiny_manifest):
    model = build_unet(MICRO)
    out, hist = train(model, tiny_manifest, TrainConfig(epochs=0))
    assert out is model and len(hist) == 0


def test_train_empty_split(tiny_manifest):
    from dataclasses import replace
    no_val = replace(tiny_manifest, entries=tuple(e for e in tiny_manifest.entries if e.split != "validation"))
    with pytest.raises(ConfigurationError, match="validation"):
        train(build_unet(MICRO), no_val, TrainConfig(epochs=1))


# checkpoints

@pytest.mark.parametrize("arch", ["unet", "deeplabv3"])
def test_checkpoint_round_trip_bit_identical(tmp_path, arch):
    spec = ModelSpec(arch=arch, task="segment", base_channels=4, depth=2, input_side=32, backbone_blocks=(1, 1, 1, 1))
    model = build_model(spec, seed=4)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path, expected_spec=spec)
    x = torch.rand(2, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    assert torch.equal(forward(model, x), forward(loaded, x))


def test_checkpoint_truncated(tmp_path):
    path = save_checkpoint(build_unet(MICRO), tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CheckpointCorrupt):
        load_checkpoint(path)
    path.write_bytes(b"junk")
    with pytest.raises(CheckpointCorrupt):
        load_checkpoint(path)


def test_checkpoint_spec_mismatch(tmp_path):
    path = save_checkpoint(build_unet(MICRO), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointSpecMismatch):
        load_checkpoint(path, arch="deeplabv3")
    with pytest.raises(CheckpointSpecMismatch):
        load_checkpoint(path, expected_spec=ModelSpec(task="classify", input_side=32, depth=2, base_channels=4))


def test_checkpoint_version_mismatch(tmp_path):
    path = save_checkpoint(build_unet(MICRO), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    data[len(MAGIC):len(MAGIC) + 4] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


# history

def test_history_csv_round_trip(tmp_path):
    hist = TrainHistory([EpochRecord(1, 0.7, 0.8, 0.5, 0.5), EpochRecord(2, 0.1234567890123, None, 1.0, None,
                                                                           "fine_tune")])
    hist.save(tmp_path / "h.csv")
    text = (tmp_path / "h.csv").read_text()
    assert text.splitlines()[0] == "epoch,train_loss,val_loss,train_acc,val_acc,phase"
    assert TrainHistory.read_csv(tmp_path / "h.csv") == hist


def test_history_csv_malformed(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("epoch,train_loss,val_loss,train_acc,val_acc\n1,0.5,0.5,abc,0.5\n")
    with pytest.raises(ValidationError, match="line 2"):
        TrainHistory.read_csv(p)
    p.write_text("epoch,train_loss,val_loss,train_acc,val_acc\n")
    with pytest.raises(ValidationError):
        TrainHistory.read_csv(p)
