import numpy as np
import pytest
from PIL import Image

from riesznet.data import crack as ck
from riesznet.data import mnist as mn
from riesznet.data.imageio import ImageFormatError, read_image, read_mask, write_image, write_mask, write_overlay
from riesznet.errors import ValidationError


# -- crack simulator ---------------------------------------------------------


def test_simulation_is_deterministic():
    a = ck.simulate_crack(ck.SimulatorConfig(width=3, seed=11))
    b = ck.simulate_crack(ck.SimulatorConfig(width=3, seed=11))
    assert np.array_equal(a.gray, b.gray)
    assert np.array_equal(a.crack_mask, b.crack_mask)
    assert np.array_equal(a.pore_mask, b.pore_mask)
    c = ck.simulate_crack(ck.SimulatorConfig(width=3, seed=12))
    assert not np.array_equal(a.crack_mask, c.crack_mask)


@pytest.mark.parametrize("w", [1, 3, 5, 7, 9, 11])
def test_crack_fraction(w):
    fractions = [ck.simulate_crack(ck.SimulatorConfig(width=w, seed=s)).crack_mask.mean() for s in range(50)]
    assert 0 < min(fractions) and max(fractions) < 0.1


@pytest.mark.parametrize("w", [3, 5, 7, 9, 11])
def test_thickness_matches_nominal_width(w):
    for seed in range(5):
        s = ck.simulate_crack(ck.SimulatorConfig(width=w, seed=seed))
        t = ck.measured_thickness(s.crack_mask, s.centerline)
        assert abs(np.median(t) - w) <= 1


def test_crack_crosses_image():
    s = ck.simulate_crack(ck.SimulatorConfig(width=1, seed=3))
    assert np.all(s.centerline.any(axis=0))
    assert np.array_equal(s.crack_mask, s.centerline)


def test_contrast():
    for seed in range(5):
        cfg = ck.SimulatorConfig(width=5, seed=seed)
        s = ck.simulate_crack(cfg)
        bg = s.gray[~(s.crack_mask | s.pore_mask)]
        gap = bg.mean() - s.gray[s.crack_mask].mean()
        assert gap >= 3 * np.hypot(cfg.background_std, cfg.dark_std)
        assert s.gray.min() >= 0 and s.gray.max() <= 255


def test_varying_width_stays_in_bounds():
    for seed in range(5):
        s = ck.simulate_crack(ck.SimulatorConfig(width_range=(3, 9), seed=seed))
        t = ck.measured_thickness(s.crack_mask, s.centerline)
        lo, hi = np.percentile(t, [5, 95])
        assert lo >= 3 - 1 and hi <= 9 + 1
        assert hi - lo >= 2


@pytest.mark.parametrize("kw", [{"width": 0}, {"width": 64}, {"hurst": 1.5}, {"pore_count": (5, 2)},
                                {"width_range": (5, 3)}])
def test_invalid_simulator_config(kw):
    with pytest.raises(ValidationError):
        ck.SimulatorConfig(**kw)


def test_tiles():
    s = ck.simulate_crack(ck.SimulatorConfig(width=3, seed=0))
    g, c, p = ck.tile_crops(s, 64)
    assert g.shape == (16, 64, 64) and c.shape == (16, 64, 64)
    np.testing.assert_array_equal(ck.assemble_tiles(g, 4, 4), s.gray)
    np.testing.assert_array_equal(ck.assemble_tiles(c, 4, 4), s.crack_mask)
    assert c.sum() == s.crack_mask.sum()
    np.testing.assert_array_equal(g[5], s.gray[64:128, 64:128])


def test_tiles_need_divisible_size():
    s = ck.simulate_crack(ck.SimulatorConfig(size=100, width=3, seed=0))
    with pytest.raises(ValidationError):
        ck.tile_crops(s, 64)


def test_tile_dataset_weights():
    samples = ck.simulate_many(ck.SimulatorConfig(width=3), 2, seed=0)
    data = ck.tile_dataset(samples)
    assert len(data) == 32
    fg = data.targets > 0
    assert np.all(data.weights[fg] == 40)


def test_simulate_many_is_pure():
    a = ck.simulate_many(ck.SimulatorConfig(width=5), 3, seed=4)
    b = ck.simulate_many(ck.SimulatorConfig(width=5), 3, seed=4)
    assert all(np.array_equal(x.gray, y.gray) for x, y in zip(a, b))
    assert len({x.seed for x in a}) == 3


# -- digits ------------------------------------------------------------------


def test_idx_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, (3, 28, 28), dtype=np.uint8)
    labels = np.array([1, 7, 3], np.uint8)
    mn.write_idx(tmp_path / "i.idx", imgs)
    mn.write_idx(tmp_path / "l.idx", labels)
    np.testing.assert_array_equal(mn.read_idx(tmp_path / "i.idx"), imgs)
    np.testing.assert_array_equal(mn.read_idx(tmp_path / "l.idx"), labels)
    raw = (tmp_path / "i.idx").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"


@pytest.mark.parametrize("blob", [b"\x00\x00\x08\x04" + b"\x00" * 12, b"\x00\x00\x08\x03\x00\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00\x02\x00",
                                  b"\x00\x00"])
def test_idx_malformed(blob):
    with pytest.raises(mn.IdxFormatError):
        mn.read_idx(blob)


def digit():
    d = np.zeros((28, 28), np.uint8)
    d[4:24, 12:16] = 255
    return d


def test_scale_one_keeps_native_extent():
    out = mn.place_digit(digit(), mn.MnistScaleConfig(scale=1.0))
    assert out.shape == (112, 112)
    np.testing.assert_array_equal(out[42:70, 42:70], digit())
    assert out[:42].max() == 0 and out[70:].max() == 0


def test_large_scale_is_clipped_and_padding_enlarges():
    d = np.full((28, 28), 200, np.uint8)
    d[0, 0] = 0
    plain = mn.place_digit(d, mn.MnistScaleConfig(scale=8.0))
    assert plain.shape == (112, 112)
    padded = mn.place_digit(d, mn.MnistScaleConfig(scale=8.0, pad=40))
    assert padded.shape == (192, 192)
    assert (padded > 100).sum() > (plain > 100).sum()


def test_build_dataset_labels(rng):
    imgs = rng.integers(0, 256, (4, 28, 28), dtype=np.uint8)
    x, y = mn.build_mnist_scale(imgs, [3, 1, 4, 1], mn.MnistScaleConfig(scale=2.0, pad=20))
    assert x.shape == (4, 152, 152)
    assert list(y) == [3, 1, 4, 1]
    assert 0 <= x.min() and x.max() <= 1


def test_scale_range_checked():
    with pytest.raises(ValidationError):
        mn.MnistScaleConfig(scale=9)


def test_stratified_split():
    labels = np.repeat(np.arange(10), 50)
    train, test = mn.stratified_split(labels, 100, seed=0)
    assert len(test) == 100 and len(train) == 400
    assert set(np.bincount(labels[test])) == {10}
    assert not set(train) & set(test)


# -- image files -------------------------------------------------------------


@pytest.mark.parametrize("ext", [".png", ".pgm"])
def test_image_round_trip(tmp_path, rng, ext):
    img = rng.integers(0, 256, (13, 17), dtype=np.uint8)
    write_image(tmp_path / f"a{ext}", img)
    np.testing.assert_array_equal(read_image(tmp_path / f"a{ext}"), img)


def test_sixteen_bit_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint16) + 1000).save(tmp_path / "a.png")
    with pytest.raises(ImageFormatError, match="bit depth"):
        read_image(tmp_path / "a.png")
    (tmp_path / "b.pgm").write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(ImageFormatError, match="bit depth"):
        read_image(tmp_path / "b.pgm")


def test_corrupt_header(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "c.pgm")
    (tmp_path / "c.png").write_bytes(b"garbage")
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "c.png")


def test_mask_values(tmp_path):
    m = np.zeros((5, 5), bool)
    m[1:3, 2] = True
    write_mask(tmp_path / "m.png", m)
    raw = np.asarray(Image.open(tmp_path / "m.png"))
    assert set(np.unique(raw)) == {0, 255}
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), m)


def test_overlay_is_red_on_gray(tmp_path):
    g = np.full((4, 4), 100, np.uint8)
    m = np.zeros((4, 4), bool)
    m[0, 0] = True
    write_overlay(tmp_path / "o.png", g, m)
    rgb = np.asarray(Image.open(tmp_path / "o.png"))
    assert tuple(rgb[0, 0]) == (255, 0, 0) and tuple(rgb[1, 1]) == (100, 100, 100)
