import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riesznet.autodiff import Parameter
from riesznet.errors import NumericError, TrainingDiverged, ValidationError
from riesznet.network import NetworkConfig, build_network, load_checkpoint, read_checkpoint
from riesznet.training import (
    DIHEDRAL_INVERSE,
    AdamState,
    ClassificationSet,
    SegmentationSet,
    TrainConfig,
    adam_step,
    augment,
    dihedral,
    evaluate_loss,
    expand_augmented,
    fit,
    lr_at_epoch,
    read_report_csv,
    weight_map,
)


def toy_segmentation(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.normal(160, 20, (n, size, size)).astype(np.float32)
    tgts = np.zeros((n, size, size), np.float32)
    for i in range(n):
        r = rng.integers(3, size - 3)
        tgts[i, r - 1:r + 2] = 1
        imgs[i][tgts[i] > 0] = 60
    return SegmentationSet(imgs, tgts, weight_map(tgts > 0, None, 40.0))


# -- schedule ----------------------------------------------------------------


@pytest.mark.parametrize("epoch,lr", [(0, 0.001), (19, 0.001), (20, 0.0005), (45, 0.00025)])
def test_lr_schedule(epoch, lr):
    assert lr_at_epoch(TrainConfig(initial_lr=0.001, lr_half_period=20), epoch) == pytest.approx(lr, rel=1e-15)


def test_lr_schedule_short_period():
    cfg = TrainConfig(initial_lr=0.001, lr_half_period=3)
    assert [lr_at_epoch(cfg, e) for e in (0, 2, 3, 6)] == [0.001, 0.001, 0.0005, 0.00025]


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"initial_lr": 0.0}, {"batch_size": 0}, {"loss": "mse"}])
def test_train_config_validation(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**kw)


# -- ADAM --------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = Parameter(np.array([1.5, -2.0]), "p", "coef")
    state = AdamState()
    adam_step([p], [np.zeros(2)], state, 0.001)
    np.testing.assert_array_equal(p.value, [1.5, -2.0])
    assert state.t == 1


def test_adam_first_step():
    p = Parameter(np.array([0.0]), "p", "coef")
    adam_step([p], [np.array([1.0])], AdamState(), 0.001)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p.value[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_identical_gradients_identical_updates(rng):
    g = rng.standard_normal(3)
    a = Parameter(np.ones(3), "a", "coef")
    b = Parameter(np.ones(3), "b", "coef")
    state = AdamState()
    for _ in range(3):
        adam_step([a, b], [g, g], state, 0.01)
    np.testing.assert_array_equal(a.value, b.value)
    assert state.t == 3
    assert state.m["a"].shape == (3,)


def test_adam_uses_parameter_gradients():
    p = Parameter(np.array([0.0]), "p", "coef")
    p.grad = np.array([2.0])
    adam_step([p], None, AdamState(), 0.1)
    assert p.value[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_nan_names_parameter():
    p = Parameter(np.array([0.0]), "layer3.coef", "coef")
    with pytest.raises(NumericError, match="layer3.coef"):
        adam_step([p], [np.array([np.nan])], AdamState(), 0.1)


def test_adam_state_round_trip(rng):
    p = Parameter(rng.standard_normal(4), "p", "coef")
    state = AdamState()
    adam_step([p], [rng.standard_normal(4)], state, 0.1)
    back = AdamState.from_records(dict(state.records()))
    assert back.t == 1
    np.testing.assert_array_equal(back.m["p"], state.m["p"])
    np.testing.assert_array_equal(back.v["p"], state.v["p"])


# -- augmentation ------------------------------------------------------------


def test_identity_transform(rng):
    x = rng.standard_normal((5, 5))
    np.testing.assert_array_equal(dihedral(x, 0), x)


def test_flip_is_involution(rng):
    x = rng.standard_normal((6, 6))
    for k in (4, 5, 6, 7):
        np.testing.assert_array_equal(dihedral(dihedral(x, k), k), x)


def test_group_has_eight_distinct_elements(rng):
    x = rng.standard_normal((4, 4))
    outs = {dihedral(x, k).tobytes() for k in range(8)}
    assert len(outs) == 8


@pytest.mark.parametrize("k", range(8))
def test_inverse_table(k, rng):
    x = rng.standard_normal((5, 5, 2))
    np.testing.assert_array_equal(dihedral(dihedral(x, k), DIHEDRAL_INVERSE[k]), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 7), st.integers(0, 2**31))
def test_joint_transform_preserves_pixel_counts(k, seed):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((8, 8))
    mask = rng.uniform(size=(8, 8)) > 0.7
    wmap = weight_map(mask)
    ti, tm, tw = augment((img, mask, wmap), k)
    assert tm.sum() == mask.sum()
    # the same permutation moves every array
    np.testing.assert_array_equal(tw, weight_map(tm))
    np.testing.assert_array_equal(np.sort(ti.ravel()), np.sort(img.ravel()))


def test_non_square_rotation_rejected(rng):
    x = rng.standard_normal((4, 6))
    for k in (1, 3, 6, 7):
        with pytest.raises(ValidationError):
            dihedral(x, k)
    assert dihedral(x, 2).shape == (4, 6)
    with pytest.raises(ValidationError):
        dihedral(np.zeros((4, 4)), 8)


def test_weight_map_values():
    crack = np.array([[1, 0], [0, 0]], bool)
    pore = np.array([[0, 0], [1, 0]], bool)
    np.testing.assert_array_equal(weight_map(crack, pore), [[40, 1], [40, 1]])
    np.testing.assert_array_equal(weight_map(crack, pore, 5.0), [[5, 1], [5, 1]])


@pytest.mark.parametrize("variants", [1, 3, 8])
def test_augmented_set_size(variants):
    data = toy_segmentation(n=3)
    out = expand_augmented(data, variants, seed=0)
    assert len(out) == 3 * variants
    np.testing.assert_array_equal(out.images[0], data.images[0])
    if variants == 8:
        first = {out.images[i].tobytes() for i in range(8)}
        assert len(first) == 8


# -- loop --------------------------------------------------------------------


def small_net(seed=0):
    return build_network(NetworkConfig((1, 6, 6, 1)), seed=seed)


def test_overfit_single_sample():
    rng = np.random.default_rng(0)
    img = rng.normal(160, 20, (64, 64)).astype(np.float32)
    tgt = np.zeros((64, 64), np.float32)
    tgt[30:33] = 1
    img[tgt > 0] = 60
    data = SegmentationSet(img[None], tgt[None], weight_map(tgt[None] > 0))
    net = small_net()
    cfg = TrainConfig(epochs=200, batch_size=1, initial_lr=0.01, lr_half_period=1000, pad=0)
    first = {}
    report = fit(net, data, None, cfg, progress=lambda r: first.setdefault("loss", r["train_loss"]))
    assert report.rows[-1]["train_loss"] < 0.1 * first["loss"]


def test_fixed_seed_reproduces_curve():
    data = toy_segmentation()
    cfg = TrainConfig(epochs=3, batch_size=2, pad=2, seed=5)
    a = fit(small_net(), data, data, cfg)
    b = fit(small_net(), data, data, cfg)
    assert [r["train_loss"] for r in a.rows] == [r["train_loss"] for r in b.rows]
    assert [r["val_loss"] for r in a.rows] == [r["val_loss"] for r in b.rows]


def test_validation_on_training_set_is_close():
    data = toy_segmentation(n=8, size=24)
    cfg = TrainConfig(epochs=25, batch_size=8, initial_lr=0.01, lr_half_period=5, pad=0)
    report = fit(small_net(), data, data, cfg)
    last = report.rows[-1]
    assert abs(last["val_loss"] - last["train_loss"]) <= 0.2 * last["train_loss"]


def test_outputs_written(tmp_path):
    data = toy_segmentation()
    cfg = TrainConfig(epochs=2, batch_size=2, pad=2)
    report = fit(small_net(), data, data, cfg, out_dir=tmp_path)
    rows = read_report_csv(tmp_path / "losses.csv")
    assert [r["epoch"] for r in rows] == [1, 2]
    assert (tmp_path / "losses.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,val_loss"
    for name in ("best.rzn", "last.rzn", "final.rzn"):
        assert (tmp_path / name).exists()
    _, meta, _ = read_checkpoint(tmp_path / "best.rzn")
    assert meta["epoch"] == report.best_epoch


def test_resume_matches_uninterrupted_run(tmp_path):
    data = toy_segmentation()
    full = TrainConfig(epochs=3, batch_size=2, pad=2, seed=1)
    fit(small_net(), data, data, full, out_dir=tmp_path / "full")
    fit(small_net(), data, data, TrainConfig(epochs=2, batch_size=2, pad=2, seed=1), out_dir=tmp_path / "part")
    resumed = small_net(seed=99)  # parameters come from the checkpoint
    report = fit(resumed, data, data, full, out_dir=tmp_path / "part", resume_from=tmp_path / "part" / "last.rzn")
    assert [r["epoch"] for r in report.rows] == [1, 2, 3]
    assert (tmp_path / "full" / "final.rzn").read_bytes() == (tmp_path / "part" / "final.rzn").read_bytes()


def test_divergence_keeps_last_good_checkpoint(tmp_path):
    data = toy_segmentation()
    net = small_net()

    def poison(row):
        net.head_coef.value[:] = np.nan

    with pytest.raises(TrainingDiverged):
        fit(net, data, data, TrainConfig(epochs=3, batch_size=2, pad=2), out_dir=tmp_path, progress=poison)
    good = load_checkpoint(tmp_path / "last.rzn")
    assert good.metadata["epoch"] == 1
    assert np.all(np.isfinite(good.head_coef.value))


def test_empty_training_set():
    empty = SegmentationSet(np.zeros((0, 8, 8)), np.zeros((0, 8, 8)), np.zeros((0, 8, 8)))
    with pytest.raises(ValidationError):
        fit(small_net(), empty, None, TrainConfig(epochs=1))


def test_classification_loss_decreases():
    rng = np.random.default_rng(0)
    imgs = np.zeros((20, 16, 16), np.float32)
    labels = np.arange(20) % 2
    for i in range(20):
        if labels[i]:
            imgs[i, 6:10, 2:14] = 1
        else:
            imgs[i, 2:14, 6:10] = 1
        imgs[i] += 0.05 * rng.standard_normal((16, 16))
    data = ClassificationSet(imgs, labels)
    net = build_network(NetworkConfig((1, 6, 6, 2), head="central-pixel-softmax"), seed=0)
    cfg = TrainConfig(epochs=15, batch_size=5, loss="softmax-ce", initial_lr=0.01, pad=0)
    report = fit(net, data, data, cfg)
    assert report.rows[-1]["train_loss"] < 0.5 * report.rows[0]["train_loss"]
    assert evaluate_loss(net, data, cfg) < np.log(2)
