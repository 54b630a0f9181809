import numpy as np
import pytest

from conftest import central_diff, rel_err
from microisp.errors import ConfigError, ContractError
from microisp.imaging import save_raw, synthesize_bayer, write_rgb, BayerImage, synthesize_pair
from microisp.metrics import (MetricsReport, evaluate_dataset, evaluate_pairs, gaussian_window,
                              psnr, ssim_metric, ssim_with_grad)
from microisp.model import ModelConfig, build_model
from microisp.training import ssim_loss


def test_window():
    g = gaussian_window()
    assert g.size == 11 and abs(g.sum() - 1) < 1e-15
    assert g[5] == g.max() and np.allclose(g, g[::-1])


def test_ssim_self_is_one(rng):
    x = rng.uniform(0, 1, (20, 24, 3))
    assert abs(ssim_metric(x, x) - 1) <= 1e-9


def test_flat_image_case():
    a, b = np.full((16, 16, 3), 0.5), np.full((16, 16, 3), 0.6)
    c1 = 0.01 ** 2
    oracle = (2 * 0.5 * 0.6 + c1) / (0.5 ** 2 + 0.6 ** 2 + c1)
    assert abs(ssim_metric(a, b) - oracle) <= 1e-12
    assert abs(ssim_metric(a, b) - 0.98364) <= 1e-4


def _loop_ssim(x, y):
    # direct per-window evaluation with explicit 2-D weights, one channel
    g = gaussian_window()
    w2 = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (w2 * px).sum(), (w2 * py).sum()
            vx = (w2 * (px - mx) ** 2).sum()
            vy = (w2 * (py - my) ** 2).sum()
            cxy = (w2 * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return np.mean(vals)


def test_ssim_matches_windowed_loop_oracle(rng):
    x, y = rng.uniform(0, 1, (14, 13, 1)), rng.uniform(0, 1, (14, 13, 1))
    assert abs(ssim_metric(x, y) - _loop_ssim(x[:, :, 0], y[:, :, 0])) < 1e-12


def test_ssim_symmetric(rng):
    a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
    assert abs(ssim_metric(a, b) - ssim_metric(b, a)) <= 1e-9


def test_ssim_gradient(rng):
    x = rng.uniform(0, 1, (16, 16, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    _, grad = ssim_with_grad(x, y)
    num = central_diff(lambda: ssim_with_grad(x, y, need_grad=False)[0], x)
    assert rel_err(grad, num) <= 1e-3


def test_ssim_batched_equals_mean(rng):
    a, b = rng.uniform(0, 1, (2, 16, 16, 3)), rng.uniform(0, 1, (2, 16, 16, 3))
    per = [ssim_metric(a[i], b[i]) for i in range(2)]
    assert abs(ssim_metric(a, b) - np.mean(per)) < 1e-12


def test_ssim_errors():
    with pytest.raises(ContractError):
        ssim_metric(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))
    with pytest.raises(ContractError):
        ssim_metric(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


def test_loss_is_one_minus_metric(rng):
    a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
    assert ssim_loss(a, b)[0] == 1 - ssim_metric(a, b)


def test_psnr_cases(rng):
    a = np.zeros((10, 10, 3))
    assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-9
    assert psnr(a, a) == 99.0
    x, y = rng.uniform(0, 1, (9, 11, 3)), rng.uniform(0, 1, (9, 11, 3))
    total = 0.0
    for v in (x - y).ravel():
        total += v * v
    oracle = 10 * np.log10(1.0 / (total / x.size))
    assert abs(psnr(x, y) - oracle) <= 1e-9
    assert psnr(x, y) == psnr(y, x)
    assert abs(psnr(2 * x, 2 * y, max_value=2.0) - oracle) <= 1e-9
    with pytest.raises(ContractError):
        psnr(x, y[:-1])


def test_report_means_and_text():
    r = MetricsReport()
    r.add("b", 30.0, 0.9)
    r.add("a", 20.0, 0.7)
    assert r.count == 2 and r.mean_psnr == 25.0 and abs(r.mean_ssim - 0.8) < 1e-15
    lines = r.to_text().splitlines()
    assert lines[1] == "b\t30.0000\t0.900000"
    assert lines[-1].startswith("# mean over 2 images")


def test_evaluate_identical_prediction(tmp_path):
    m = build_model(ModelConfig(0.25))
    for v in m.params.values():
        v[...] = 0
    save_raw(BayerImage(32, 32, 16, "RGGB", 0, 65535, np.zeros((32, 32), np.uint16)), tmp_path / "z.braw")
    write_rgb(np.zeros((32, 32, 3)), tmp_path / "z.ppm")
    r = evaluate_dataset(m, tmp_path)
    assert r.names == ["z"] and r.psnr == [99.0] and abs(r.ssim[0] - 1) < 1e-12


def test_evaluate_recomposition_and_order(tmp_path):
    m = build_model(ModelConfig(0.25), 1)
    for i, stem in enumerate(["c", "a", "b"]):
        raw, target = synthesize_bayer(i, (32, 32))
        save_raw(raw, tmp_path / f"{stem}.braw")
        write_rgb(target, tmp_path / f"{stem}.ppm", 16)
    r = evaluate_dataset(m, tmp_path)
    assert r.names == ["a", "b", "c"]
    assert r.mean_psnr == np.mean(r.psnr) and r.mean_ssim == np.mean(r.ssim)
    pairs = [synthesize_pair(i, (32, 32)) for i in range(3)]
    forward_report = evaluate_pairs(m, pairs, ["x", "y", "z"])
    shuffled = evaluate_pairs(m, pairs[::-1], ["z", "y", "x"])
    assert forward_report.to_text() == shuffled.to_text()
    par = evaluate_pairs(m, pairs, ["x", "y", "z"], mode="parallel", threads=3)
    assert par.to_text() == forward_report.to_text()


def test_evaluate_empty(tmp_path):
    with pytest.raises(ConfigError):
        evaluate_dataset(build_model(ModelConfig(0.25)), tmp_path)
