import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from sadconv.dataio import (BitDepthError, DatasetLayoutError, MissingImageError, NotPNGError, SynthConfig,
                            Triplet, load_image, load_mask, save_image, save_mask, scan_istd, shadow_fraction_mask,
                            stack_batch, synth_triplets, write_istd)


def _luminance(img):
    return 0.2126 * img[0] + 0.7152 * img[1] + 0.0722 * img[2]


# -- images ------------------------------------------------------------------

def test_save_load_within_half_quantum(tmp_path):
    img = np.random.default_rng(0).random((3, 9, 7))
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert back.shape == (3, 9, 7) and back.dtype == np.float32
    assert np.abs(back - img).max() <= 1 / 510 + 1e-6


def test_all_black_png_loads_as_zeros(tmp_path):
    Image.new("RGB", (4, 3)).save(tmp_path / "b.png")
    img = load_image(tmp_path / "b.png")
    assert img.shape == (3, 3, 4) and not img.any()


def test_save_load_is_idempotent(tmp_path):
    save_image(np.random.default_rng(1).random((3, 6, 6)), tmp_path / "p.png")
    once = load_image(tmp_path / "p.png")
    save_image(once, tmp_path / "q.png")
    twice = load_image(tmp_path / "q.png")
    save_image(twice, tmp_path / "r.png")
    assert once.tobytes() == twice.tobytes() == load_image(tmp_path / "r.png").tobytes()


def test_save_clamps_out_of_range(tmp_path):
    save_image(np.full((3, 2, 2), 1.5), tmp_path / "c.png")
    assert (load_image(tmp_path / "c.png") == 1).all()


def test_image_error_kinds(tmp_path):
    with pytest.raises(MissingImageError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(NotPNGError):
        load_image(tmp_path / "junk.png")
    Image.new("RGB", (2, 2)).save(tmp_path / "j.jpg", format="JPEG")
    with pytest.raises(NotPNGError):
        load_image(tmp_path / "j.jpg")
    Image.fromarray(np.zeros((2, 2), np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(BitDepthError):
        load_image(tmp_path / "deep.png")


def test_missing_image_is_also_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


# -- masks -------------------------------------------------------------------

@pytest.mark.parametrize("value, expected", [(255, True), (0, False)])
def test_uniform_masks(tmp_path, value, expected):
    Image.new("L", (5, 4), value).save(tmp_path / "m.png")
    m = load_mask(tmp_path / "m.png")
    assert m.shape == (4, 5) and m.dtype == bool and (m == expected).all()


def test_checkerboard_mask_is_exact(tmp_path):
    board = (np.indices((6, 8)).sum(axis=0) % 2).astype(bool)
    Image.fromarray(board.astype(np.uint8) * 255).save(tmp_path / "cb.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "cb.png"), board)


def test_mask_threshold_and_rgb_input(tmp_path):
    Image.fromarray(np.array([[127, 128]], np.uint8)).save(tmp_path / "t.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "t.png"), [[False, True]])
    Image.new("RGB", (2, 2), (255, 255, 255)).save(tmp_path / "rgb.png")
    assert load_mask(tmp_path / "rgb.png").all()


def test_mask_round_trip(tmp_path):
    m = np.random.default_rng(2).random((7, 5)) < 0.4
    save_mask(m, tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


# -- dataset scan ------------------------------------------------------------

def _touch_triplet(root, name, folders=("A", "B", "C")):
    for f in folders:
        (root / f).mkdir(parents=True, exist_ok=True)
        Image.new("RGB" if f != "B" else "L", (4, 4)).save(root / f / name)


def test_scan_empty_folders(tmp_path):
    for f in "ABC":
        (tmp_path / f).mkdir()
    result = scan_istd(tmp_path)
    assert result.triplets == [] and result.skipped == []


def test_scan_joins_and_reports_orphans(tmp_path):
    for name in ("b.png", "a.png", "c.png"):
        _touch_triplet(tmp_path, name)
    Image.new("RGB", (4, 4)).save(tmp_path / "A" / "orphan.png")
    result = scan_istd(tmp_path)
    assert [t.id for t in result.triplets] == ["a", "b", "c"]
    assert result.skipped == ["A/orphan.png"]
    assert scan_istd(tmp_path) == result
    t = result.triplets[0].load()
    assert t.shadow_image.shape == (3, 4, 4) and t.mask.shape == (4, 4)


def test_scan_missing_subfolder(tmp_path):
    (tmp_path / "A").mkdir()
    with pytest.raises(DatasetLayoutError, match="B"):
        scan_istd(tmp_path)


def test_scan_custom_folder_names(tmp_path):
    _touch_triplet(tmp_path, "x.png", ("train_A", "train_B", "train_C"))
    assert len(scan_istd(tmp_path, ("train_A", "train_B", "train_C")).triplets) == 1


# -- triplets ----------------------------------------------------------------

def test_triplet_rejects_incongruent_shapes():
    with pytest.raises(ValueError, match="shapes differ"):
        Triplet(np.zeros((3, 4, 4)), np.zeros((4, 5), bool), np.zeros((3, 4, 4)), "bad")
    with pytest.raises(ValueError):
        Triplet(np.zeros((1, 4, 4)), np.zeros((4, 4), bool), np.zeros((1, 4, 4)))


def test_stack_batch_shapes():
    ts = synth_triplets(SynthConfig(seed=0, size=16), 3)
    x, m, y = stack_batch(ts)
    assert x.shape == y.shape == (3, 3, 16, 16) and m.shape == (3, 16, 16)


# -- synthetic generator -----------------------------------------------------

def test_synth_is_deterministic():
    a = synth_triplets(SynthConfig(seed=7, size=24), 4)
    b = synth_triplets(SynthConfig(seed=7, size=24), 4)
    for s, t in zip(a, b):
        assert s.id == t.id
        for name in ("shadow_image", "mask", "free_image"):
            assert getattr(s, name).tobytes() == getattr(t, name).tobytes()
    c = synth_triplets(SynthConfig(seed=8, size=24), 1)[0]
    assert c.free_image.tobytes() != a[0].free_image.tobytes()


def test_synth_prefix_is_stable_in_n():
    a = synth_triplets(SynthConfig(seed=3, size=16), 2)
    b = synth_triplets(SynthConfig(seed=3, size=16), 5)
    assert all(s.shadow_image.tobytes() == t.shadow_image.tobytes() for s, t in zip(a, b))


def test_synth_zero_count():
    assert synth_triplets(SynthConfig(), 0) == []


def test_synth_no_op_shadow():
    for t in synth_triplets(SynthConfig(seed=1, size=20, alpha_range=(1.0, 1.0), tint=0.0), 5):
        assert t.shadow_image.tobytes() == t.free_image.tobytes()
        assert t.mask.any()


@pytest.mark.parametrize("texture", ["smooth", "stripes"])
@pytest.mark.parametrize("shape", ["ellipse", "polygon", "mixed"])
def test_synth_shadow_darker_than_rest(texture, shape):
    for t in synth_triplets(SynthConfig(seed=2, size=32, texture=texture, shape_family=shape), 20):
        lum = _luminance(t.shadow_image)
        assert lum[t.mask].mean() < lum[~t.mask].mean()
        assert t.shadow_image.dtype == np.float32
        assert t.shadow_image.min() >= 0 and t.shadow_image.max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.floats(0.3, 0.95), st.integers(0, 1000))
def test_synth_rho_target_is_met(rho, seed):
    t = synth_triplets(SynthConfig(seed=seed, size=32, rho_target=rho), 1)[0]
    assert abs((1 - t.mask.mean()) - rho) <= 0.05


def test_synth_outputs_survive_disk_round_trip(tmp_path):
    ts = synth_triplets(SynthConfig(seed=4, size=12), 3)
    write_istd(ts, tmp_path)
    loaded = [p.load() for p in scan_istd(tmp_path).triplets]
    for s, t in zip(ts, loaded):
        assert s.id == t.id
        assert s.shadow_image.tobytes() == t.shadow_image.tobytes()
        assert s.free_image.tobytes() == t.free_image.tobytes()
        np.testing.assert_array_equal(s.mask, t.mask)


@pytest.mark.parametrize("kwargs", [dict(alpha_range=(0.0, 0.5)), dict(alpha_range=(0.6, 0.3)),
                                    dict(shape_family="blob"), dict(texture="noise"), dict(rho_target=1.2),
                                    dict(size=2)])
def test_synth_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


@pytest.mark.parametrize("frac", [0.0, 0.1, 0.37, 1.0])
def test_shadow_fraction_mask_exact_count(frac):
    m = shadow_fraction_mask(20, 30, frac)
    assert m.sum() == round(frac * 600)
