import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cxrvit.preprocess import (
    PrepConfig,
    fit_normalization,
    gaussian_blur3,
    gaussian_kernel3,
    histogram_equalize,
    normalize,
    preprocess,
    preprocess_batch,
    read_image,
    resize,
    write_png,
)
from cxrvit.serialize import save_tensor

images = arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(3, 12)), elements=st.floats(0, 1))


class TestHistogramEqualize:
    def test_constant_image(self):
        out = histogram_equalize(np.full((4, 5), 0.3))
        np.testing.assert_array_equal(out, 1.0)

    def test_two_levels(self):
        img = np.array([[0.2, 0.8], [0.8, 0.2]])
        out = histogram_equalize(img)
        np.testing.assert_array_equal(out, [[0.5, 1.0], [1.0, 0.5]])

    def test_uniform_histogram_is_fixed_point(self):
        img = ((np.arange(256) + 0.5) / 256).reshape(16, 16)
        out = histogram_equalize(img)
        counts, _ = np.histogram(out, bins=16, range=(0.0, 1.0 + 1e-9))
        assert counts.tolist() == [16] * 16
        np.testing.assert_allclose(out, img + 0.5 / 256)

    @settings(max_examples=40, deadline=None)
    @given(images)
    def test_monotone_and_in_range(self, img):
        out = histogram_equalize(img)
        assert out.min() > 0 and out.max() <= 1.0
        order = np.argsort(img.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order]) >= 0)

    def test_bins_validation(self):
        with pytest.raises(ValueError):
            histogram_equalize(np.zeros((3, 3)), bins=1)


class TestGaussianBlur:
    def test_constant_image(self):
        np.testing.assert_allclose(gaussian_blur3(np.full((5, 6), 0.4)), 0.4, rtol=0, atol=1e-15)

    def test_impulse_stamp(self):
        img = np.zeros((5, 5))
        img[2, 2] = 1.0
        # kernel from the 0.8 sigma formula, evaluated independently
        g = np.array([np.exp(-1 / 1.28), 1.0, np.exp(-1 / 1.28)])
        stamp = np.outer(g, g) / np.outer(g, g).sum()
        out = gaussian_blur3(img)
        np.testing.assert_allclose(out[1:4, 1:4], stamp, rtol=0, atol=1e-15)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(np.delete(np.delete(out, [1, 2, 3], 0), [1, 2, 3], 1), 0.0)

    def test_kernel_normalized(self):
        assert gaussian_kernel3().sum() == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(images)
    def test_convex_combination(self, img):
        out = gaussian_blur3(img)
        assert out.min() >= img.min() - 1e-15
        assert out.max() <= img.max() + 1e-15

    def test_mean_preserved_interior(self):
        img = np.zeros((40, 40))
        img[10:30, 12:25] = np.random.default_rng(0).uniform(size=(20, 13))
        assert gaussian_blur3(img).mean() == pytest.approx(img.mean(), abs=1e-9)

    def test_too_small(self):
        with pytest.raises(ValueError):
            gaussian_blur3(np.zeros((2, 5)))


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(3).uniform(size=(7, 9))
        assert resize(img, 7, 9).tobytes() == img.tobytes()

    def test_checkerboard_corners(self):
        out = resize(np.array([[0.0, 1.0], [1.0, 0.0]]), 4, 4)
        assert out[0, 0] == 0.0 and out[0, 3] == 1.0 and out[3, 0] == 1.0 and out[3, 3] == 0.0
        # half-pixel convention: dst 1 samples src 0.25
        assert out[0, 1] == pytest.approx(0.25)
        assert out[1, 1] == pytest.approx(0.375)

    @pytest.mark.parametrize("shape", [(1, 1), (3, 8), (16, 5)])
    def test_constant(self, shape):
        np.testing.assert_allclose(resize(np.full((4, 6), 0.7), *shape), 0.7, rtol=0, atol=1e-15)

    def test_downsample_average(self):
        img = np.arange(16.0).reshape(4, 4)
        np.testing.assert_allclose(resize(img, 2, 2), img.reshape(2, 2, 2, 2).mean(axis=(1, 3)))


class TestNormalize:
    def test_identity(self):
        img = np.random.default_rng(1).uniform(size=(3, 4))
        out = normalize(img, 0.0, 1.0)
        assert out.shape == (1, 1, 3, 4)
        np.testing.assert_array_equal(out.data[0, 0], img)

    def test_centering(self):
        np.testing.assert_array_equal(normalize(np.full((3, 3), 0.5), 0.5, 0.25).data, 0.0)

    def test_rejects_non_positive_std(self):
        with pytest.raises(ValueError):
            normalize(np.zeros((3, 3)), 0.0, 0.0)

    def test_dataset_statistics(self):
        rng = np.random.default_rng(5)
        imgs = [rng.uniform(size=(32, 32)) ** 2 for _ in range(6)]
        cfg = fit_normalization(imgs, PrepConfig(size=32))
        out = preprocess_batch(imgs, cfg)
        assert abs(out.mean()) < 1e-6
        assert out.std() == pytest.approx(1.0, abs=1e-6)


class TestPipeline:
    def test_pure_function(self):
        img = np.random.default_rng(2).uniform(size=(40, 40))
        cfg = PrepConfig(size=64, mean=0.5, std=0.3)
        assert preprocess(img, cfg).tobytes() == preprocess(img.copy(), cfg).tobytes()

    def test_orders_differ_and_resize(self):
        img = np.random.default_rng(2).uniform(size=(40, 40))
        a = preprocess(img, PrepConfig(size=32))
        b = preprocess(img, PrepConfig(size=32, order="blur,equalize,normalize,resize"))
        assert a.shape == b.shape == (32, 32)
        assert not np.array_equal(a, b)

    def test_unknown_order(self):
        with pytest.raises(ValueError):
            PrepConfig(order="resize,blur")


def test_png_and_raw_io(tmp_path):
    img = np.random.default_rng(9).uniform(size=(6, 5))
    write_png(tmp_path / "a.png", img)
    back = read_image(tmp_path / "a.png")
    np.testing.assert_allclose(back, np.round(img * 255) / 255)
    save_tensor(tmp_path / "a.img", img)
    assert read_image(tmp_path / "a.img").tobytes() == img.tobytes()
    from PIL import Image

    Image.fromarray((img * 65535).astype(np.uint16)).save(tmp_path / "b.png")
    np.testing.assert_allclose(read_image(tmp_path / "b.png"), img, atol=2e-5)
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "missing.png")
