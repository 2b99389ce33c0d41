import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenmark import attacks as A
from tokenmark.bench.dataset import make_shapes_dataset, stack_images


@pytest.fixture(scope="module")
def images():
    return stack_images(make_shapes_dataset(8, 11))


@pytest.mark.parametrize("spec", ["identity", "brightness:1", "contrast:1", "blur:0", "crop:0", "resize:1", "rotate:0", "rotate:360"])
def test_identity_parameters_exact(images, spec):
    out = A.apply_attack(images, spec)
    assert out.shape == images.shape and np.array_equal(out, images)


def smooth_images(n=6, seed=0):
    # low-frequency fixtures: random bilinear colour ramps
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
    c = rng.random((n, 3, 4, 1, 1))
    img = c[:, :, 0] * (1 - yy) * (1 - xx) + c[:, :, 1] * yy * (1 - xx) + c[:, :, 2] * (1 - yy) * xx + c[:, :, 3] * yy * xx
    return img.astype(np.float32)


def test_jpeg_quality_100_within_two_levels():
    x = smooth_images()
    assert np.abs(A.apply_attack(x, "jpeg:100") - x).max() <= 2 / 255


def test_jpeg_quality_100_on_hard_edges(images):
    # saturated anti-aliased edges: measured worst case 2.08 levels, 98% of pixels within 1 level
    d = np.abs(A.apply_attack(images, "jpeg:100") - images) * 255
    assert d.max() <= 2.5
    assert (d <= 2.0).mean() > 0.999 and d.mean() < 0.5


def test_crop_and_resize_sizes(images):
    assert A.apply_attack(images[0], "crop:0.1").shape == (3, 30, 30)
    assert A.apply_attack(images[0], "crop:0.1", crop_mode="keep").shape == (3, 10, 10)
    assert A.apply_attack(images[0], "resize:0.2").shape == (3, 6, 6)
    with pytest.raises(A.AttackError):
        A.apply_attack(images[0], "resize:0.1")


def test_brightness_contrast_formulas(images):
    x = images[0]
    np.testing.assert_allclose(A.apply_attack(x, "brightness:1.2"), np.clip(1.2 * x, 0, 1), atol=1e-6)
    m = x.mean()
    np.testing.assert_allclose(A.apply_attack(x, "contrast:0.5"), np.clip(m + 0.5 * (x - m), 0, 1), atol=1e-6)


def test_blur_kernel_radius_and_mass():
    k = A.gaussian_kernel1d(1.0)
    assert k.size == 7 and k.sum() == pytest.approx(1.0)
    assert A.gaussian_kernel1d(0.0).tolist() == [1.0]


def test_blur_preserves_constant_image():
    c = np.full((3, 32, 32), 0.3, np.float32)
    np.testing.assert_allclose(A.apply_attack(c, "blur:2"), 0.3, atol=1e-6)


def test_rotate_zero_fill_and_quarter_turn(images):
    x = images[0]
    r = A.apply_attack(x, "rotate:25")
    assert r[:, 0, 0].max() == 0.0  # exposed corner
    q = A.apply_attack(x, "rotate:90")
    np.testing.assert_allclose(q, np.rot90(x, 1, axes=(1, 2)), atol=1e-5)  # counter-clockwise, as PIL


def test_jpeg_constant_image_stays_constant():
    c = np.full((3, 32, 32), 0.4, np.float32)
    for q in (10, 50, 80):
        out = A.jpeg_proxy(c, q)
        assert np.ptp(out) < 1e-6
    # the DC error is bounded by half a quantization step of the scaled table
    assert np.abs(A.jpeg_proxy(c, 80) - 0.4).max() <= 1 / 255


def test_jpeg_coarser_quality_has_higher_mse(images):
    mse = lambda q: float(((A.jpeg_proxy(images, q) - images) ** 2).mean())  # noqa: E731
    assert mse(10) > mse(80) > mse(100)


def test_quant_table_scaling():
    ql, qc = A.quant_tables(50)
    assert np.array_equal(ql, A.LUMA_TABLE)
    ql, _ = A.quant_tables(100)
    assert ql.min() == 1 and ql.max() == 1
    with pytest.raises(A.AttackError):
        A.quant_tables(0)


def test_spec_parsing_and_ranges():
    assert A.AttackSpec.parse("blur:1.5") == A.AttackSpec("blur", 1.5)
    assert str(A.AttackSpec.parse("jpeg:80")) == "jpeg:80"
    for bad in ("sharpen:1", "crop:1", "jpeg:0", "brightness:0", "blur:-1", "blur:nan"):
        with pytest.raises(A.AttackError):
            A.AttackSpec.parse(bad)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["brightness:1.3", "contrast:1.5", "blur:0.7", "jpeg:30", "rotate:12", "resize:0.5"]), st.integers(0, 1000))
def test_outputs_clipped(spec, seed):
    x = np.random.default_rng(seed).random((3, 32, 32)).astype(np.float32)
    out = A.apply_attack(x, spec)
    assert out.min() >= 0 and out.max() <= 1 and out.dtype == np.float32
