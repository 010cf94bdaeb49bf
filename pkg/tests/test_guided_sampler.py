import numpy as np
import pytest
import torch

from dynaguide import diffusion_core as dc
from dynaguide import guided_sampler as gs
from dynaguide import networks as nx
from dynaguide.field_core import derive_rng, make_rng
from dynaguide.metrics import MetricError

torch.set_num_threads(1)

MU0, STD0 = 0.3, 0.7


def gaussian_denoiser(x, t):
    """Exact posterior mean for a 1-D Gaussian target under isotropic noising."""
    return (STD0**2 * x + t**2 * MU0) / (STD0**2 + t**2)


def cfg_for(n_steps=12, **kw):
    base = dict(schedule=dc.schedule(0.002, 80.0, 7.0, n_steps),
                s_churn=55.0, s_noise=1.005, lam=14.0, guided=False, seed=0)
    base.update(kw)
    return gs.SamplerConfig(**base)


class TestConfig:
    def test_validation(self):
        with pytest.raises(gs.SamplerError):
            cfg_for(s_churn=-1.0)
        with pytest.raises(gs.SamplerError):
            cfg_for(s_noise=0.0)
        with pytest.raises(gs.SamplerError):
            cfg_for(s_tmin=2.0, s_tmax=1.0)
        with pytest.raises(gs.SamplerError):
            cfg_for(lam=float("inf"))

    def test_churn_gamma_formula(self):
        rng = make_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 90))
            churn = float(rng.uniform(0, 150))
            lo = float(rng.uniform(0, 1.0))
            hi = lo + float(rng.uniform(0, 100))
            cfg = cfg_for(n_steps=n, s_churn=churn, s_tmin=lo, s_tmax=hi)
            got = gs.churn_gammas(cfg)
            t = cfg.schedule.sigmas[:-1]
            assert got.shape == (n,)
            for i in range(n):
                if lo <= t[i] <= hi:
                    assert got[i] == min(churn / n, np.sqrt(2.0) - 1.0)
                else:
                    assert got[i] == 0.0

    def test_window_outside_all_levels_disables_churn(self):
        cfg = cfg_for(s_tmax=1e-4, s_tmin=0.0)
        assert np.all(gs.churn_gammas(cfg) == 0.0)


class TestGenerate:
    def test_lambda_zero_bit_identical_to_unguided(self):
        guided = cfg_for(lam=0.0, guided=True, seed=3)
        unguided = cfg_for(lam=0.0, guided=False, seed=3)
        g = gs.generate(gaussian_denoiser, (4, 1, 6, 6), guided,
                        guidance_fn=lambda x, t: -x)
        u = gs.generate(gaussian_denoiser, (4, 1, 6, 6), unguided)
        assert np.array_equal(g, u)

    def test_nonzero_lambda_changes_output(self):
        guided = cfg_for(lam=2.0, guided=True, seed=3)
        unguided = cfg_for(lam=0.0, guided=False, seed=3)
        g = gs.generate(gaussian_denoiser, (4, 1, 6, 6), guided,
                        guidance_fn=lambda x, t: -x)
        u = gs.generate(gaussian_denoiser, (4, 1, 6, 6), unguided)
        assert not np.allclose(g, u)

    def test_two_guidance_evaluations_per_nonterminal_step(self):
        n = 9
        cfg = cfg_for(n_steps=n, guided=True, lam=1.0)
        calls = []
        gs.generate(gaussian_denoiser, (1, 1, 4, 4), cfg,
                    guidance_fn=lambda x, t: (calls.append(t), -0.1 * x)[1])
        assert len(calls) == 2 * n - 1
        ts = cfg.schedule.sigmas
        gammas = gs.churn_gammas(cfg)
        for i in range(n - 1):
            t_hat = ts[i] + gammas[i] * ts[i]
            assert calls[2 * i] == pytest.approx(t_hat, rel=1e-12)
            assert calls[2 * i + 1] == pytest.approx(ts[i + 1], rel=1e-12)
        last_hat = ts[n - 1] + gammas[n - 1] * ts[n - 1]
        assert calls[-1] == pytest.approx(last_hat, rel=1e-12)

    def test_guided_flag_and_guidance_fn_must_agree(self):
        with pytest.raises(gs.SamplerError, match="requires a guidance"):
            gs.generate(gaussian_denoiser, (1, 1, 4, 4), cfg_for(guided=True))
        with pytest.raises(gs.SamplerError, match="guided is off"):
            gs.generate(gaussian_denoiser, (1, 1, 4, 4), cfg_for(guided=False),
                        guidance_fn=lambda x, t: -x)

    def test_churn_disabled_reduces_to_deterministic_heun(self):
        cfg = cfg_for(n_steps=7, s_churn=0.0, seed=11)
        out = gs.generate(gaussian_denoiser, (3, 1, 5, 5), cfg)
        ts = cfg.schedule.sigmas
        rng = make_rng(cfg.seed)
        x = torch.from_numpy((ts[0] * rng.standard_normal((3, 1, 5, 5))).astype(np.float32))
        for i in range(ts.size - 1):
            t, tn = float(ts[i]), float(ts[i + 1])
            s = (x - gaussian_denoiser(x, t)) / t
            xe = x + (tn - t) * s
            if tn != 0.0:
                s2 = (xe - gaussian_denoiser(xe, tn)) / tn
                x = x + (tn - t) * (0.5 * s + 0.5 * s2)
            else:
                x = xe
        assert np.array_equal(out, x.numpy())

    def test_deterministic_for_fixed_seed(self):
        cfg = cfg_for(seed=21)
        a = gs.generate(gaussian_denoiser, (2, 1, 4, 4), cfg)
        b = gs.generate(gaussian_denoiser, (2, 1, 4, 4), cfg)
        assert np.array_equal(a, b)

    def test_probe_sees_every_step(self):
        n = 6
        cfg = cfg_for(n_steps=n)
        seen = []
        gs.generate(gaussian_denoiser, (1, 1, 4, 4), cfg, probe=seen.append)
        assert [p["step"] for p in seen] == list(range(n))
        assert [p["t"] for p in seen] == [pytest.approx(v) for v in cfg.schedule.sigmas[1:]]
        assert all(p["x"].shape == (1, 1, 4, 4) for p in seen)

    def test_nonfinite_denoiser_reports_stage_and_step(self):
        def bad(x, t):
            return x * float("nan") if t < 1.0 else gaussian_denoiser(x, t)

        with pytest.raises(gs.SamplerError, match=r"step \d+, stage (first|second) denoise"):
            gs.generate(bad, (1, 1, 4, 4), cfg_for())

    def test_nonfinite_guidance_reports_stage(self):
        cfg = cfg_for(guided=True, lam=1.0)
        with pytest.raises(gs.SamplerError, match="guidance"):
            gs.generate(gaussian_denoiser, (1, 1, 4, 4), cfg,
                        guidance_fn=lambda x, t: x * float("inf"))

    def test_gaussian_oracle_with_churn(self):
        """Unconditional samples reproduce a known Gaussian target.

        At 80 steps the residual discretization bias is ~1.4% in std and
        ~|mu|*std/sigma_max in mean (from initializing at N(0, t_0^2) instead
        of the exact noised marginal); bounds are 3.5 Monte-Carlo standard
        errors on 10k samples plus those known biases.
        """
        cfg = cfg_for(n_steps=80, s_churn=55.0, s_noise=1.0, seed=2)
        out = gs.generate(gaussian_denoiser, (10000, 1, 1, 1), cfg, rng=make_rng(9))
        assert abs(out.mean() - MU0) < 0.028
        assert abs(out.std() / STD0 - 1.0) < 0.04

    def test_gaussian_oracle_without_churn(self):
        cfg = cfg_for(n_steps=80, s_churn=0.0, seed=4)
        out = gs.generate(gaussian_denoiser, (10000, 1, 1, 1), cfg, rng=make_rng(10))
        assert abs(out.mean() - MU0) < 0.028
        assert abs(out.std() / STD0 - 1.0) < 0.03


class _PredictPrevious:
    """Stand-in conditional score model whose denoised estimate is always the
    older conditioning frame, so rollouts alternate the two initial frames."""

    in_channels = 3

    def __call__(self, inp, c_noise):
        sig = torch.exp(4.0 * c_noise).reshape(-1, 1, 1, 1)
        pre = dc.Preconditioner(0.5)
        x = inp[:, 0:1] / pre.c_in(sig)
        prev = inp[:, 2:3]
        return (prev - pre.c_skip(sig) * x) / pre.c_out(sig)


def small_state(seed=0, size=8):
    rng = make_rng(seed)
    return gs.RolloutState(current=rng.standard_normal((1, size, size)),
                           previous=rng.standard_normal((1, size, size)))


class TestRolloutState:
    def test_validation(self):
        with pytest.raises(gs.SamplerError, match="shapes differ"):
            gs.RolloutState(np.zeros((1, 4, 4)), np.zeros((1, 5, 5)))
        with pytest.raises(gs.SamplerError, match="finite"):
            gs.RolloutState(np.full((1, 4, 4), np.nan), np.zeros((1, 4, 4)))
        with pytest.raises(gs.SamplerError, match="channels, height, width"):
            gs.RolloutState(np.zeros((4, 4)), np.zeros((4, 4)))


class TestSampleNext:
    def test_channel_wiring_errors(self):
        net = nx.ScoreUNet(2, widths=(8, 12), blocks_per_level=1, emb_dim=16)
        with pytest.raises(gs.SamplerError, match="expects 2 channels"):
            gs.sample_next(net, dc.Preconditioner(), small_state(), cfg_for(guided=False))

    def test_disc_iff_guided(self):
        with pytest.raises(gs.SamplerError, match="requires a discriminator"):
            gs.sample_next(_PredictPrevious(), dc.Preconditioner(),
                           small_state(), cfg_for(guided=True))
        disc = nx.DiscriminatorNet(3, widths=(8,), blocks_per_level=1,
                                   emb_dim=16, head_width=8)
        with pytest.raises(gs.SamplerError, match="guided is off"):
            gs.sample_next(_PredictPrevious(), dc.Preconditioner(),
                           small_state(), cfg_for(guided=False), disc=disc)

    def test_unconditional_net_runs(self):
        torch.manual_seed(0)
        net = nx.ScoreUNet(1, widths=(8, 12), blocks_per_level=1, emb_dim=16)
        out = gs.sample_next(net, dc.Preconditioner(), small_state(),
                             cfg_for(n_steps=4, guided=False))
        assert out.shape == (1, 8, 8)
        assert np.isfinite(out).all()

    def test_guided_with_zero_head_matches_unguided(self):
        torch.manual_seed(1)
        net = nx.ScoreUNet(1, widths=(8, 12), blocks_per_level=1, emb_dim=16)
        disc = nx.DiscriminatorNet(3, widths=(8,), blocks_per_level=1,
                                   emb_dim=16, head_width=8)
        state = small_state(2)
        a = gs.sample_next(net, dc.Preconditioner(), state,
                           cfg_for(n_steps=4, guided=True, lam=14.0), disc=disc)
        b = gs.sample_next(net, dc.Preconditioner(), state,
                           cfg_for(n_steps=4, guided=False))
        assert np.array_equal(a, b)


class TestRollout:
    def test_zero_steps_empty(self):
        traj = gs.rollout(_PredictPrevious(), dc.Preconditioner(), small_state(),
                          0, cfg_for(guided=False), dt_physical=0.5)
        assert traj.values.shape == (0, 1, 8, 8)
        assert traj.dt_physical == 0.5

    def test_window_shifts_each_step(self):
        init = small_state(3)
        cfg = cfg_for(n_steps=6, s_churn=0.0, guided=False, seed=5)
        traj = gs.rollout(_PredictPrevious(), dc.Preconditioner(), init, 4, cfg)
        assert np.allclose(traj.values[0], init.previous, atol=1e-4)
        assert np.allclose(traj.values[1], init.current, atol=1e-4)
        assert np.allclose(traj.values[2], traj.values[0], atol=1e-4)
        assert np.allclose(traj.values[3], traj.values[1], atol=1e-4)

    def test_deterministic(self):
        cfg = cfg_for(n_steps=4, guided=False, seed=8)
        a = gs.rollout(_PredictPrevious(), dc.Preconditioner(), small_state(4), 3, cfg)
        b = gs.rollout(_PredictPrevious(), dc.Preconditioner(), small_state(4), 3, cfg)
        assert np.array_equal(a.values, b.values)

    def test_error_carries_step_index(self):
        class Exploding(_PredictPrevious):
            def __init__(self):
                self.calls = 0

            def __call__(self, inp, c_noise):
                self.calls += 1
                if self.calls > 10:
                    return inp[:, 0:1] * float("nan")
                return super().__call__(inp, c_noise)

        with pytest.raises(gs.SamplerError, match=r"rollout step [12]:"):
            gs.rollout(Exploding(), dc.Preconditioner(), small_state(5), 3,
                       cfg_for(n_steps=4, guided=False))

    def test_negative_steps_rejected(self):
        with pytest.raises(gs.SamplerError, match=">= 0"):
            gs.rollout(_PredictPrevious(), dc.Preconditioner(), small_state(), -1,
                       cfg_for(guided=False))


class TestEnsembleForecast:
    def test_single_member_equals_rollout(self):
        cfg = cfg_for(n_steps=4, guided=False, seed=13)
        init = small_state(6)
        truth = make_rng(7).standard_normal((1, 5, 8, 8))
        ens = gs.ensemble_forecast(_PredictPrevious(), dc.Preconditioner(),
                                   [init], members=1, lead=5, cfg=cfg, truth=truth)
        solo = gs.rollout(_PredictPrevious(), dc.Preconditioner(), init, 5, cfg,
                          rng=derive_rng(cfg.seed, 0, 0))
        assert np.array_equal(ens.values[0, 0], solo.values[:, 0].astype(np.float64))

    def test_members_reproducible_in_isolation(self):
        cfg = cfg_for(n_steps=4, guided=False, seed=14)
        inits = [small_state(20), small_state(21)]
        truth = make_rng(8).standard_normal((2, 3, 8, 8))
        ens = gs.ensemble_forecast(_PredictPrevious(), dc.Preconditioner(),
                                   inits, members=3, lead=3, cfg=cfg, truth=truth)
        redo = gs.rollout(_PredictPrevious(), dc.Preconditioner(), inits[1], 3, cfg,
                          rng=derive_rng(cfg.seed, 1, 2))
        assert np.array_equal(ens.values[1, 2], redo.values[:, 0].astype(np.float64))
        assert ens.n_forecasts == 2 and ens.n_members == 3 and ens.n_leads == 3

    def test_truth_shape_validated(self):
        cfg = cfg_for(n_steps=4, guided=False)
        with pytest.raises(MetricError, match="truth shape"):
            gs.ensemble_forecast(_PredictPrevious(), dc.Preconditioner(),
                                 [small_state()], members=2, lead=3, cfg=cfg,
                                 truth=np.zeros((1, 4, 8, 8)))

    def test_multichannel_rejected(self):
        state = gs.RolloutState(np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))
        with pytest.raises(gs.SamplerError, match="single-channel"):
            gs.ensemble_forecast(_PredictPrevious(), dc.Preconditioner(), [state],
                                 members=1, lead=2, cfg=cfg_for(guided=False),
                                 truth=np.zeros((1, 2, 8, 8)))

    def test_empty_inits_rejected(self):
        with pytest.raises(gs.SamplerError, match="at least one"):
            gs.ensemble_forecast(_PredictPrevious(), dc.Preconditioner(), [],
                                 members=1, lead=2, cfg=cfg_for(guided=False),
                                 truth=np.zeros((0, 2, 8, 8)))
