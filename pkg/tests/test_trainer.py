import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tempest import presets, trainer
from tempest.bayes_opt import bo_loop
from tempest.errors import InvalidArgumentError, NumericalFailureError
from tempest.forward_ops import corrupt, op_radon
from tempest.metrics import psnr
from tempest.phantoms import disk, shepp_logan
from tempest.schema import LossReport, Method, NetConfig, RunConfig, TaskKind, TaskSpec, TemperConfig
from tempest.tensor_engine import Tensor
from tempest.trainer import AdamState, Reconstructor, step_adamw, step_sgld

DENOISE = TaskSpec(kind=TaskKind.DENOISE, noise_std=0.1)


def _cfg(method, net, **kwargs):
    extra = {
        Method.POTOBIM: {"temper": TemperConfig(temperature=1e-3, sigma_prior=0.1)},
        Method.MCD: {"dropout_p": 0.1, "weight_decay": 1e-4},
        Method.SGLD: {"lr_decay": 0.99, "weight_decay": 1e-4},
        Method.DIP: {"weight_decay": 0.0},
    }[method]
    extra.update(kwargs)
    extra.setdefault("task", DENOISE)
    extra.setdefault("iterations", 4)
    return RunConfig(method=method, net=net, eval_every=2, eval_samples=3, **extra)


def _observation(size=16, seed=0):
    gt = disk(size) * 0.8 + 0.1
    return gt, corrupt(gt, DENOISE, seed=seed)


def test_adamw_with_zero_gradients_only_decays():
    p = [np.ones((2, 2)), np.full(3, -2.0)]
    out = step_adamw(p, [np.zeros((2, 2)), np.zeros(3)], AdamState(), lr=1e-2, weight_decay=0.1)
    assert_array_equal(out[0], np.full((2, 2), 0.9))
    assert_array_equal(out[1], np.full(3, -1.8))


def test_adamw_first_step_moves_by_lr():
    out = step_adamw([np.array([1.0, 1.0])], [np.array([3.0, -0.5])], AdamState(), lr=1e-2, weight_decay=0.0)
    assert_allclose(out[0], [0.99, 1.01], rtol=1e-6)


def test_adamw_minimises_a_quadratic_bowl():
    w = [np.array([1.0, -0.5, 2.0])]
    state = AdamState()
    for _ in range(5000):
        w = step_adamw(w, [w[0].copy()], state, lr=1e-2, weight_decay=0.0)
    assert np.max(np.abs(w[0])) < 1e-6
    assert state.step == 5000


def test_adamw_rejects_mismatched_gradients():
    with pytest.raises(InvalidArgumentError):
        step_adamw([np.zeros(2)], [np.zeros(3)], AdamState(), lr=1e-3, weight_decay=0.0)


def test_sgld_noise_has_langevin_scale():
    lr = 1e-3
    out = step_sgld([np.zeros(10**6)], [np.zeros(10**6)], lr=lr, weight_decay=0.0, rng=0)
    assert np.std(out[0]) == pytest.approx(np.sqrt(2 * lr), rel=1e-2)
    assert abs(np.mean(out[0])) < 1e-3


def test_sgld_without_noise_is_sgd(rng):
    p = [rng.normal(size=(3, 3))]
    g = [rng.normal(size=(3, 3))]
    out = step_sgld(p, g, lr=0.05, weight_decay=0.01, rng=1, noise_scale=0.0)
    assert_array_equal(out[0], (1.0 - 0.01) * p[0] - 0.05 * g[0])


def test_sgld_with_vanishing_lr_only_decays(rng):
    p = [rng.normal(size=50)]
    out = step_sgld(p, [rng.normal(size=50)], lr=1e-300, weight_decay=0.2, rng=2)
    assert_allclose(out[0], 0.8 * p[0], rtol=1e-12)


def test_sgld_needs_a_positive_lr():
    with pytest.raises(InvalidArgumentError):
        step_sgld([np.zeros(2)], [np.zeros(2)], lr=0.0, weight_decay=0.0, rng=0)


def test_image_shape_per_task():
    sr = _cfg(Method.DIP, NetConfig(heteroscedastic=False), task=TaskSpec(kind=TaskKind.SR))
    assert trainer.image_shape(sr, np.zeros((8, 8))) == (32, 32)
    ct = _cfg(Method.DIP, NetConfig(heteroscedastic=False), task=TaskSpec(kind=TaskKind.CT, n_angles=6))
    assert trainer.image_shape(ct, np.zeros((6, 16))) == (16, 16)
    with pytest.raises(InvalidArgumentError):
        trainer.image_shape(ct, np.zeros((5, 16)))


def test_runs_are_deterministic(tiny_net_cfg):
    _, y = _observation()
    cfg = _cfg(Method.DIP, tiny_net_cfg)
    a = trainer.run(cfg, y)
    b = trainer.run(cfg, y)
    assert_array_equal(a.reconstruction, b.reconstruction)
    assert a.uncertainty is None
    assert a.status == "ok"


def test_potobim_run_writes_its_trace(tmp_path, small_net_cfg):
    gt, y = _observation()
    cfg = _cfg(Method.POTOBIM, small_net_cfg)
    path = tmp_path / "trace.csv"
    result = trainer.run(cfg, y, gt=gt, trace_path=path, checkpoint_path=tmp_path / "net.ckpt")

    assert [row.iteration for row in result.trace] == [2, 4]
    for row in result.trace:
        assert row.loss == pytest.approx(cfg.temper.temperature * row.kl + row.nll, rel=1e-9)
        assert row.psnr is not None
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["iteration"]) for r in rows] == [2, 4]
    assert (tmp_path / "net.ckpt").exists()

    assert result.reconstruction.shape == (16, 16)
    assert np.all((result.reconstruction >= 0) & (result.reconstruction <= 1))
    assert np.all(result.epistemic >= 0)
    assert_allclose(result.uncertainty, result.epistemic + result.aleatoric, atol=1e-12)


def test_mcd_and_sgld_runs(small_net_cfg):
    _, y = _observation()
    mcd = trainer.run(_cfg(Method.MCD, small_net_cfg), y)
    assert mcd.uncertainty.shape == (16, 16)

    cfg = _cfg(Method.SGLD, small_net_cfg, iterations=6, lr=1e-4)
    sgld = trainer.run(cfg, y)
    assert sgld.trace[-1].lr == pytest.approx(1e-4 * 0.99 ** 5, rel=1e-12)
    assert sgld.trace[-1].kl is None
    assert np.all(sgld.epistemic >= 0)


def test_ct_run_has_no_aleatoric_term(tiny_net_cfg):
    task = TaskSpec(kind=TaskKind.CT, n_angles=6, angle_step_deg=30.0)
    y = op_radon(disk(16), task.angles()).values
    result = trainer.run(_cfg(Method.POTOBIM, tiny_net_cfg, task=task, iterations=2), y)
    assert result.reconstruction.shape == (16, 16)
    assert result.aleatoric is None
    assert_array_equal(result.uncertainty, result.epistemic)


def test_failures_are_recorded_on_the_result(small_net_cfg):
    _, y = _observation()
    cfg = _cfg(Method.POTOBIM, small_net_cfg, task=TaskSpec(kind=TaskKind.INPAINT))
    result = Reconstructor(cfg).run(y)
    assert result.status == "error"
    assert "InvalidArgumentError" in result.error
    with pytest.raises(InvalidArgumentError):
        result.raise_for_status()


def test_non_finite_loss_aborts_the_run(monkeypatch, tiny_net_cfg):
    def exploding_loss(*args, **kwargs):
        report = LossReport(nll=float("nan"), kl=0.0, elbo_t=float("nan"), temperature=1.0, mc_samples=1)
        return Tensor(np.array([np.nan])), report

    monkeypatch.setattr(trainer, "tempered_loss", exploding_loss)
    _, y = _observation()
    with pytest.raises(NumericalFailureError):
        trainer.run(_cfg(Method.DIP, tiny_net_cfg), y)


def _desk_denoising(seed=5):
    gt = shepp_logan(64)
    return gt, corrupt(gt, DENOISE, seed=seed)


DESK_NET = NetConfig(depth=3, channels=16, skip_channels=4, in_channels=8)


@pytest.mark.slow
def test_bo_tuned_cold_posterior_beats_the_baselines():
    gt, y = _desk_denoising()
    base = RunConfig.for_method(Method.POTOBIM, DENOISE, iterations=3000, net=DESK_NET, eval_every=500)

    def objective(point):
        return psnr(gt, trainer.run(presets.apply_point(base, Method.POTOBIM, point), y).reconstruction)

    search = bo_loop(
        presets.search_space(Method.POTOBIM),
        objective,
        presets.initial_candidates(Method.POTOBIM),
        iterations=1,
        seed=0,
    )
    cold = presets.apply_point(base, Method.POTOBIM, search.best_point)
    warm = cold.model_copy(update={"temper": cold.temper.model_copy(update={"temperature": 1.0})})
    dip = RunConfig.for_method(Method.DIP, DENOISE, iterations=3000, net=DESK_NET, eval_every=500)

    cold_psnr = search.best_value
    assert cold_psnr == pytest.approx(psnr(gt, trainer.run(cold, y).reconstruction), abs=1e-9)
    assert cold_psnr > psnr(gt, np.clip(y, 0, 1))
    assert cold_psnr > psnr(gt, trainer.run(warm, y).reconstruction)
    assert cold_psnr > psnr(gt, trainer.run(dip, y).reconstruction)


@pytest.mark.slow
def test_cold_posterior_trace_does_not_collapse_late():
    gt, y = _desk_denoising()
    cfg = RunConfig.for_method(Method.POTOBIM, DENOISE, iterations=3000, net=DESK_NET, eval_every=50)
    trace = trainer.run(cfg, y, gt=gt).trace
    tail = [row.psnr for row in trace if row.iteration > 0.8 * cfg.iterations]
    assert len(tail) >= 10
    assert max(tail) - trace[-1].psnr <= 0.5


@pytest.mark.slow
def test_dip_overfits_after_an_interior_peak():
    gt, y = _desk_denoising()
    cfg = RunConfig.for_method(Method.DIP, DENOISE, iterations=5000, net=DESK_NET, eval_every=50)
    trace = [row.psnr for row in trainer.run(cfg, y, gt=gt).trace]
    peak = int(np.argmax(trace))
    assert 0 < peak < len(trace) - 1
    assert trace[peak] >= trace[-1] + 1.0
