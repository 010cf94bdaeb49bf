"""Stochastic second-order sampler with consistency guidance, rollouts, forecasts.

The core generator is written against two closures: a denoiser D(x; t) and an
optional guidance gradient g(x; t).  Rollout and forecast drivers wire real
networks into those closures one autoregressive step at a time.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion_core as dc
from . import discriminator as dsc
from .field_core import TrajectoryDataset, derive_rng, make_rng
from .metrics import EnsembleForecast


class SamplerError(Exception):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs of the stochastic sampler.

    lam is the guidance strength multiplying the classifier gradient inside
    both solver stages; churn is active on steps whose noise level lies in
    [s_tmin, s_tmax].
    """

    schedule: dc.NoiseSchedule
    s_churn: float = 55.0
    s_noise: float = 1.005
    s_tmin: float = 0.0
    s_tmax: float = 1000.0
    lam: float = 14.0
    guided: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.s_churn < 0:
            raise SamplerError("s_churn must be >= 0")
        if self.s_noise <= 0:
            raise SamplerError("s_noise must be positive")
        if self.s_tmin > self.s_tmax:
            raise SamplerError("s_tmin must not exceed s_tmax")
        if not np.isfinite(self.lam):
            raise SamplerError("lam must be finite")


def churn_gammas(cfg: SamplerConfig) -> np.ndarray:
    """gamma_i = min(s_churn/T, sqrt(2)-1) inside [s_tmin, s_tmax], else 0."""
    t = cfg.schedule.sigmas[:-1]
    n = t.size
    gamma = min(cfg.s_churn / n, np.sqrt(2.0) - 1.0)
    active = (t >= cfg.s_tmin) & (t <= cfg.s_tmax)
    return np.where(active, gamma, 0.0)


def _check_finite(x: torch.Tensor, step: int, stage: str, t: float):
    if not torch.isfinite(x).all():
        raise SamplerError(f"non-finite state: step {step}, stage {stage}, t={t:.6g}")


def generate(denoiser, shape, cfg: SamplerConfig, rng=None, guidance_fn=None,
             probe=None) -> np.ndarray:
    """One reverse pass from pure noise to a clean sample.

    denoiser(x, t) -> denoised estimate; guidance_fn(x, t) -> logit gradient
    (required when cfg.guided).  Every step draws churn noise even when the
    churn coefficient is zero, so trajectories with different churn windows
    stay on the same random stream.  probe(info) is called once per step
    after the update with the current iterate.
    """
    if cfg.guided and guidance_fn is None:
        raise SamplerError("guided sampling requires a guidance function")
    if not cfg.guided and guidance_fn is not None:
        raise SamplerError("guidance function given but cfg.guided is off")
    if rng is None:
        rng = make_rng(cfg.seed)
    ts = cfg.schedule.sigmas
    gammas = churn_gammas(cfg)
    x = torch.from_numpy(
        (ts[0] * rng.standard_normal(shape)).astype(np.float32)
    )

    def slope(xi: torch.Tensor, t: float, step: int, stage: str) -> torch.Tensor:
        den = denoiser(xi, t).detach()
        _check_finite(den, step, f"{stage} denoise", t)
        s = (xi - den) / t
        if cfg.guided:
            d = guidance_fn(xi, t)
            _check_finite(d, step, f"{stage} guidance", t)
            s = s + cfg.lam * (-t * d)
        return s

    for i in range(ts.size - 1):
        t_i, t_next = float(ts[i]), float(ts[i + 1])
        eps = torch.from_numpy(
            (cfg.s_noise * rng.standard_normal(shape)).astype(np.float32)
        )
        t_hat = t_i + float(gammas[i]) * t_i
        x_hat = x + float(np.sqrt(t_hat**2 - t_i**2)) * eps
        _check_finite(x_hat, i, "churn", t_hat)
        s_i = slope(x_hat, t_hat, i, "first")
        x = x_hat + (t_next - t_hat) * s_i
        _check_finite(x, i, "euler", t_next)
        if t_next != 0.0:
            s_prime = slope(x, t_next, i, "second")
            x = x_hat + (t_next - t_hat) * (0.5 * s_i + 0.5 * s_prime)
            _check_finite(x, i, "heun", t_next)
        if probe:
            probe({"step": i, "t": t_next, "t_hat": t_hat, "x": x.numpy().copy(),
                   "guided": cfg.guided})
    return x.numpy()


@dataclass(frozen=True)
class RolloutState:
    """Clean conditioning window in model space: the frame being extended
    and the one before it."""

    current: np.ndarray
    previous: np.ndarray
    index: int = 0

    def __post_init__(self):
        cur = np.asarray(self.current, dtype=np.float32)
        prev = np.asarray(self.previous, dtype=np.float32)
        if cur.ndim != 3 or prev.ndim != 3:
            raise SamplerError("state frames must be (channels, height, width)")
        if cur.shape != prev.shape:
            raise SamplerError(f"frame shapes differ: {cur.shape} vs {prev.shape}")
        if not (np.isfinite(cur).all() and np.isfinite(prev).all()):
            raise SamplerError("state frames must be finite")
        object.__setattr__(self, "current", cur)
        object.__setattr__(self, "previous", prev)


def _wire(score_net, pre, state: RolloutState, cfg: SamplerConfig, disc,
          sigma_data: float):
    """Build denoiser/guidance closures for one autoregressive step."""
    c = state.current.shape[0]
    cond = torch.from_numpy(np.concatenate([state.current, state.previous])[None])

    def no_grad_denoise(x, t, use_cond):
        with torch.no_grad():
            return dc.denoise(score_net, pre, x, t, cond=cond if use_cond else None)

    if score_net.in_channels == c:
        den = lambda x, t: no_grad_denoise(x, t, False)
    elif score_net.in_channels == 3 * c:
        den = lambda x, t: no_grad_denoise(x, t, True)
    else:
        raise SamplerError(
            f"score network expects {score_net.in_channels} channels; "
            f"state provides {c} (unconditional) or {3 * c} (conditional)"
        )
    guid = None
    if cfg.guided:
        if disc is None:
            raise SamplerError("cfg.guided requires a discriminator")
        guid = lambda x, t: dsc.guidance(disc, x, cond, t, sigma_data)
    elif disc is not None:
        raise SamplerError("discriminator given but cfg.guided is off")
    return den, guid, cond


def sample_next(score_net, pre: dc.Preconditioner, state: RolloutState,
                cfg: SamplerConfig, disc=None, rng=None, probe=None) -> np.ndarray:
    """Generate the next clean frame for a conditioning window."""
    den, guid, _ = _wire(score_net, pre, state, cfg, disc, pre.sigma_data)
    shape = (1,) + state.current.shape
    out = generate(den, shape, cfg, rng=rng, guidance_fn=guid, probe=probe)
    return out[0]


def rollout(score_net, pre: dc.Preconditioner, init: RolloutState, steps: int,
            cfg: SamplerConfig, disc=None, rng=None, dt_physical: float = 1.0,
            progress=None, probe=None) -> TrajectoryDataset:
    """Autoregressive free run: generate, shift the window, repeat."""
    if steps < 0:
        raise SamplerError("steps must be >= 0")
    if rng is None:
        rng = make_rng(cfg.seed)
    state = init
    frames = np.empty((steps,) + init.current.shape, dtype=np.float32)
    for n in range(steps):
        try:
            nxt = sample_next(score_net, pre, state, cfg, disc=disc, rng=rng,
                              probe=probe)
        except SamplerError as e:
            raise SamplerError(f"rollout step {n}: {e}") from None
        assert np.isfinite(nxt).all(), f"rollout step {n}: non-finite frame escaped"
        frames[n] = nxt
        state = RolloutState(current=nxt, previous=state.current,
                             index=state.index + 1)
        if progress:
            progress(n, nxt)
    return TrajectoryDataset(values=frames, dt_physical=dt_physical, split="none")


def ensemble_forecast(score_net, pre: dc.Preconditioner, inits, members: int,
                      lead: int, cfg: SamplerConfig, truth: np.ndarray,
                      weights=None, disc=None, dt_physical: float = 1.0,
                      progress=None) -> EnsembleForecast:
    """Ensemble of short rollouts from each initial window.

    Member (f, b) runs on its own random stream derived from (seed, f, b),
    so any subset reproduces identically regardless of execution order.
    Fields must be single-channel; output axes are (forecast, member, lead,
    height, width).
    """
    if members < 1 or lead < 1:
        raise SamplerError("members and lead must be >= 1")
    inits = list(inits)
    if not inits:
        raise SamplerError("at least one initial state is required")
    if inits[0].current.shape[0] != 1:
        raise SamplerError("ensemble forecasts support single-channel fields only")
    shape = inits[0].current.shape[1:]
    values = np.empty((len(inits), members, lead) + shape, dtype=np.float32)
    for f, init in enumerate(inits):
        for b in range(members):
            rng = derive_rng(cfg.seed, f, b)
            traj = rollout(score_net, pre, init, lead, cfg, disc=disc, rng=rng,
                           dt_physical=dt_physical)
            values[f, b] = traj.values[:, 0]
        if progress:
            progress(f)
    return EnsembleForecast(values=values, truth=np.asarray(truth, dtype=np.float32),
                            weights=weights)
