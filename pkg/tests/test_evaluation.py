import numpy as np
import pytest

from tracefuse.evaluation import (TABLE_ROWS, DistortionError, DistortionKind, DistortionSpec, MetricsReport,
                                  OracleModel, distort, distort_pair, evaluate, jpeg_roundtrip, write_mask_png)
from tracefuse.evaluation.distort import blur_sigma, gaussian_kernel
from tracefuse.evaluation.jpeg import LUMA, quant_table
from tracefuse.forge.dataset import build_dataset, read_png
from tracefuse.forge.scenes import ManipulationType as M, gen_base_scene

EVEN = {M.SPLICE: 0.25, M.COPY_MOVE: 0.25, M.REMOVE: 0.25, M.AUTHENTIC: 0.25}
K = DistortionKind


def smooth_image():
    y, x = np.mgrid[0:64, 0:64] / 63.0
    return np.stack([0.3 + 0.4 * x, 0.5 + 0.2 * y, 0.6 - 0.3 * x * y])


@pytest.mark.parametrize("kind,param", [(K.RESIZE, 0), (K.RESIZE, 1.5), (K.GAUSS_BLUR, 4), (K.GAUSS_BLUR, 1),
                                        (K.GAUSS_NOISE, -1), (K.JPEG, 0), (K.JPEG, 101)])
def test_spec_validation(kind, param):
    with pytest.raises(DistortionError):
        DistortionSpec(kind, param)


def test_spec_parse_and_labels():
    assert DistortionSpec.parse("jpeg:50") == DistortionSpec(K.JPEG, 50)
    assert DistortionSpec.parse("NONE").kind is K.NONE
    with pytest.raises(DistortionError):
        DistortionSpec.parse("SHARPEN:2")
    with pytest.raises(DistortionError):
        DistortionSpec.parse("JPEG")
    labels = [s.label for s in TABLE_ROWS]
    assert labels == ["None", "Resize (0.78x)", "Resize (0.25x)", "GSBr (k=3)", "GSBr (k=15)",
                      "GSN (sigma=3)", "GSN (sigma=15)", "JPEG (q=100)", "JPEG (q=50)"]


def test_none_is_identity():
    img = gen_base_scene(1)
    assert np.array_equal(distort(img, DistortionSpec()), img)


def test_resize_shapes_agree():
    img = gen_base_scene(2)
    mask = np.zeros((64, 64), np.uint8)
    mask[10:30, 5:20] = 1
    for scale, side in ((0.78, 50), (0.25, 16)):
        out, m = distort_pair(img, mask, DistortionSpec(K.RESIZE, scale))
        assert out.shape == (3, side, side) and m.shape == (side, side)
        assert set(np.unique(m).tolist()) <= {0, 1}


def test_blur_kernel():
    assert blur_sigma(3) == pytest.approx(0.8)
    assert blur_sigma(15) == pytest.approx(2.6)
    g = gaussian_kernel(15)
    assert g.sum() == pytest.approx(1.0) and np.argmax(g) == 7
    img = gen_base_scene(3)
    out = distort(img, DistortionSpec(K.GAUSS_BLUR, 15))
    assert out.std() < img.std()


def test_gaussian_noise_statistics_and_determinism():
    img = np.full((3, 64, 64), 0.5)
    spec = DistortionSpec(K.GAUSS_NOISE, 15)
    out = distort(img, spec, seed=4)
    assert abs((out - img).std() * 255 / 15 - 1) < 0.1
    assert np.array_equal(out, distort(img, spec, seed=4))
    assert not np.array_equal(out, distort(img, spec, seed=5))


def test_jpeg_quality_table_scaling():
    assert np.array_equal(quant_table(LUMA, 50), LUMA)
    assert np.all(quant_table(LUMA, 100) == 1)
    assert quant_table(LUMA, 10)[0, 0] == 80


def test_jpeg_roundtrip_error():
    img = smooth_image()
    hi = jpeg_roundtrip(img, 100)
    lo = jpeg_roundtrip(img, 50)
    assert np.abs(hi - img).mean() < 2 / 255
    noisy = gen_base_scene(5)
    assert np.abs(jpeg_roundtrip(noisy, 50) - noisy).mean() > np.abs(jpeg_roundtrip(noisy, 100) - noisy).mean()
    assert lo.shape == img.shape
    odd = jpeg_roundtrip(np.random.default_rng(0).uniform(size=(3, 13, 10)), 75)
    assert odd.shape == (3, 13, 10)


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    return build_dataset(12, EVEN, 21, tmp_path_factory.mktemp("eval"))


def test_oracle_model_scores_one(small_set):
    images, masks = small_set.load_arrays()
    rep = evaluate(OracleModel(images, masks), small_set)
    r = rep.results[0]
    assert (r.f1_fixed, r.f1_optimal, r.auc, r.recall_fake) == (1.0, 1.0, 1.0, 1.0)
    assert r.n_excluded == 3 and r.n_localized == 9 and r.n_images == 12


def test_anti_oracle_and_constant(small_set):
    images, masks = small_set.load_arrays()
    anti = evaluate(OracleModel(images, 1.0 - masks), small_set).results[0]
    assert anti.f1_fixed == 0.0 and anti.auc == 0.0
    const = evaluate(OracleModel(images, np.full(masks.shape, 0.5), fake_text=True), small_set).results[0]
    assert const.auc == 0.5
    assert const.recall_fake == 1.0


def test_report_formats(small_set, tmp_path):
    images, masks = small_set.load_arrays()
    rep = evaluate(OracleModel(images, masks), small_set)
    rep.save(tmp_path)
    text = (tmp_path / "metrics.txt").read_text()
    assert "None.auc = 1.000000" in text
    csv = (tmp_path / "metrics.csv").read_text().splitlines()
    assert csv[0] == "distortion,f1_fixed,f1_optimal,auc,recall_fake,n_images"
    again = MetricsReport.from_json((tmp_path / "metrics.json").read_text())
    assert again.results == rep.results


def test_mask_png_writer(tmp_path):
    p = np.linspace(0, 1, 64 * 64).reshape(64, 64)
    write_mask_png(tmp_path / "m.png", p)
    back = read_png(tmp_path / "m.png")[0]
    np.testing.assert_allclose(back, np.round(p * 255) / 255)
