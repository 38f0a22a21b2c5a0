import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import LinearClassifier
from sia_lab.metrics import (MetricResult, attack_success_rate, balanced_accuracy,
                             classification_metrics, keypoint_error, psnr, read_report, ssim,
                             success_rate, write_report)

img = arrays(np.float64, (8, 8, 3), elements=st.floats(0.0, 1.0))


# --- PSNR -----------------------------------------------------------------------------

def test_psnr_identical_is_capped():
    x = np.full((4, 4), 0.3)
    assert psnr(x, x) == 100.0


def test_psnr_known_mse():
    x = np.zeros((10, 10))
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    assert psnr(np.zeros(5), np.ones(5)) == pytest.approx(0.0)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


@given(img, img)
def test_psnr_symmetric(x, y):
    assert psnr(x, y) == psnr(y, x)


def test_psnr_decreases_with_noise(rng):
    x = rng.uniform(0, 1, (16, 16))
    noise = rng.standard_normal((16, 16))
    values = [psnr(x, x + s * noise) for s in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


# --- SSIM -------------------------------------------------------------------------------

@given(img)
def test_ssim_identity(x):
    assert ssim(x, x) == pytest.approx(1.0)


def test_ssim_black_white():
    C1 = 0.01 ** 2
    assert ssim(np.zeros((8, 8)), np.ones((8, 8))) == pytest.approx(C1 / (1 + C1))


@given(img, img)
def test_ssim_symmetric_and_bounded(x, y):
    v = ssim(x, y)
    assert v == pytest.approx(ssim(y, x))
    assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)), window=8)


# --- keypoints and classification --------------------------------------------------------

def test_keypoint_error_three_four_five():
    assert keypoint_error([(0, 0)], [(3, 4)]) == pytest.approx(5.0)
    assert keypoint_error([(0, 0), (1, 1)], [(3, 4), (1, 1)], normalizer=2.5) == pytest.approx(1.0)


def test_keypoint_error_errors():
    with pytest.raises(ValueError):
        keypoint_error([(0, 0)], [(0, 0), (1, 1)])
    with pytest.raises(ValueError):
        keypoint_error([(0, 0)], [(0, 0)], normalizer=0)


def test_classification_confusion_example():
    preds = [1, 1, 1, 0] + [0] * 6
    gts = [1, 1, 0, 1] + [0] * 6
    rep = classification_metrics(preds, gts)
    assert (rep.tp, rep.fp, rep.fn, rep.tn) == (2, 1, 1, 6)
    np.testing.assert_allclose(rep.as_tuple(), [2 / 3, 2 / 3, 0.8, 2 / 3])
    assert not rep.degenerate


def test_classification_second_example():
    preds = [1, 0, 0, 0, 1, 0, 0]
    gts = [1, 1, 0, 0, 0, 0, 1]
    rep = classification_metrics(preds, gts)
    assert rep.precision == pytest.approx(0.5)
    assert rep.recall == pytest.approx(1 / 3)
    assert rep.accuracy == pytest.approx(4 / 7)


def test_all_negative_predictions_are_degenerate():
    rep = classification_metrics(np.zeros(10), [0, 1] * 5)
    assert rep.recall == 0.0 and rep.accuracy == 0.5
    assert "precision" in rep.degenerate and rep.precision == 0.0


def test_perfect_predictions():
    y = [0, 1, 1, 0, 1]
    assert classification_metrics(y, y).as_tuple() == (1.0, 1.0, 1.0, 1.0)
    assert balanced_accuracy(y, y) == 1.0


def test_classification_errors():
    with pytest.raises(ValueError):
        classification_metrics([1], [1, 0])
    with pytest.raises(ValueError):
        classification_metrics([], [])


# --- attack success -----------------------------------------------------------------------------

def test_success_rate_counts_and_ordering(rng):
    flags = np.array([True] * 683 + [False] * 317)
    assert success_rate(flags) == pytest.approx(0.683)
    assert success_rate(rng.permutation(flags)) == success_rate(flags)
    with pytest.raises(ValueError):
        success_rate([])


def test_attack_success_rate_with_model():
    model = LinearClassifier(np.ones((2, 2)), b=-2.0)
    xs = [np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2))]
    # predictions: 1, 0, 1
    assert attack_success_rate(model, xs, [0, 0, 1]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        attack_success_rate(model, xs, [0])


# --- report.json ------------------------------------------------------------------------------------

def test_report_round_trip(tmp_path):
    metrics = [MetricResult("asr", np.float64(0.5), 10, {"eps": 1 / 255}),
               MetricResult("psnr", 41.2, 10)]
    path = write_report(tmp_path / "report.json", metrics, {"seed": 3})
    doc = read_report(path)
    assert doc["schema_version"] == 1 and doc["seed"] == 3
    assert doc["metrics"][0] == {"name": "asr", "value": 0.5, "count": 10,
                                 "params": {"eps": 1 / 255}}


def test_report_requires_schema_version(tmp_path):
    (tmp_path / "r.json").write_text("{}")
    with pytest.raises(ValueError):
        read_report(tmp_path / "r.json")
