"""Pseudo-spectral 2D incompressible Navier-Stokes in vorticity form.

Doubly periodic domain of length 2*pi (integer wavenumbers), vorticity zeta
with streamfunction psi, zeta = laplacian(psi):

    d zeta/dt = -u . grad(zeta) - nu * k^(2p) * zeta - mu * zeta + F

Advection is evaluated pseudo-spectrally with 2/3-rule dealiasing and the
state lives in rfft2 space (shape L x L/2+1, axis 0 = row frequency). The
stochastic forcing is white in time, supported on a spectral annulus around
the forcing wavenumber, redrawn every step, held fixed across Runge-Kutta
substeps, and normalized so the expected kinetic-energy injection rate equals
the configured target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from dynaguide.field_core import TrajectoryDataset, make_rng


class SimConfigError(ValueError):
    """Inconsistent simulation configuration."""


class SimulationBlowUpError(RuntimeError):
    """Non-finite state detected during time stepping."""


@dataclass(frozen=True)
class SimConfig:
    """Solver parameters; wavenumbers are integer (domain length 2*pi)."""

    grid_size: int = 64
    dt: float = 0.005
    nu: float = 1e-4
    hyper_order: int = 2
    mu: float = 0.1
    k_f: float = 6.0
    delta_f: float = 1.5
    eps_inject: float = 0.1
    subsample: int = 4
    spinup_steps: int = 500
    n_frames: int = 1000
    seed: int = 0

    def __post_init__(self):
        L = self.grid_size
        if L < 4 or (L & (L - 1)) != 0:
            raise SimConfigError(f"grid_size must be a power of two >= 4, got {L}")
        if self.dt <= 0:
            raise SimConfigError("dt must be positive")
        if self.nu < 0 or self.mu < 0:
            raise SimConfigError("nu and mu must be nonnegative")
        if self.hyper_order < 1:
            raise SimConfigError("hyper_order must be >= 1")
        if not 0 < self.k_f < L / 2:
            raise SimConfigError(f"k_f must lie below the Nyquist wavenumber {L // 2}")
        if self.subsample < 1 or self.spinup_steps < 0 or self.n_frames < 0:
            raise SimConfigError("subsample/spinup_steps/n_frames out of range")


@dataclass(frozen=True)
class SpectralState:
    """rfft2 vorticity plus the forcing active for the current step."""

    zeta_hat: np.ndarray
    forcing_hat: np.ndarray
    t_model: float = 0.0


@lru_cache(maxsize=8)
def _grids(L: int):
    kx = np.fft.rfftfreq(L, d=1.0 / L)          # (L/2+1,) column frequencies
    ky = np.fft.fftfreq(L, d=1.0 / L)           # (L,)     row frequencies
    k2 = (ky[:, None] ** 2 + kx[None, :] ** 2)
    inv_k2 = np.zeros_like(k2)
    nz = k2 > 0
    inv_k2[nz] = 1.0 / k2[nz]
    cutoff = L // 3  # 2/3 of the Nyquist wavenumber L/2
    dealias = (np.abs(ky)[:, None] <= cutoff) & (np.abs(kx)[None, :] <= cutoff)
    # column multiplicity for sums over the full spectral plane
    mult = np.full(kx.shape, 2.0)
    mult[0] = 1.0
    if L % 2 == 0:
        mult[-1] = 1.0
    for arr in (kx, ky, k2, inv_k2, dealias, mult):
        arr.setflags(write=False)
    return kx, ky, k2, inv_k2, dealias, mult


def zero_state(cfg: SimConfig) -> SpectralState:
    shape = (cfg.grid_size, cfg.grid_size // 2 + 1)
    return SpectralState(np.zeros(shape, complex), np.zeros(shape, complex), 0.0)


def rhs(state: SpectralState, cfg: SimConfig) -> np.ndarray:
    """Spectral tendency d(zeta_hat)/dt for the current state and forcing."""
    L = cfg.grid_size
    kx, ky, k2, inv_k2, dealias, _ = _grids(L)
    zh = state.zeta_hat

    psi_hat = -zh * inv_k2
    u = np.fft.irfft2(-1j * ky[:, None] * psi_hat, s=(L, L))
    v = np.fft.irfft2(1j * kx[None, :] * psi_hat, s=(L, L))
    zx = np.fft.irfft2(1j * kx[None, :] * zh, s=(L, L))
    zy = np.fft.irfft2(1j * ky[:, None] * zh, s=(L, L))
    adv_hat = np.fft.rfft2(u * zx + v * zy) * dealias

    tend = -adv_hat - (cfg.nu * k2**cfg.hyper_order + cfg.mu) * zh + state.forcing_hat
    tend[0, 0] = 0.0
    return tend


def rk4_step(state: SpectralState, cfg: SimConfig, step: int | None = None) -> SpectralState:
    """Classical RK4 update with the forcing frozen across substeps."""
    dt = cfg.dt
    z = state.zeta_hat
    k1 = rhs(state, cfg)
    k2_ = rhs(replace(state, zeta_hat=z + 0.5 * dt * k1), cfg)
    k3 = rhs(replace(state, zeta_hat=z + 0.5 * dt * k2_), cfg)
    k4 = rhs(replace(state, zeta_hat=z + dt * k3), cfg)
    z_new = z + (dt / 6.0) * (k1 + 2.0 * k2_ + 2.0 * k3 + k4)
    z_new[0, 0] = 0.0
    if not np.all(np.isfinite(z_new.view(np.float64))):
        where = f" at step {step}" if step is not None else ""
        raise SimulationBlowUpError(f"simulation blow-up{where} (t={state.t_model:g})")
    return SpectralState(z_new, state.forcing_hat, state.t_model + dt)


@lru_cache(maxsize=32)
def _annulus_cached(L: int, k_f: float, delta_f: float) -> np.ndarray:
    _, _, k2, _, _, _ = _grids(L)
    k_mag = np.sqrt(k2)
    mask = (np.abs(k_mag - k_f) <= delta_f) & (k2 > 0)
    mask.setflags(write=False)
    return mask


def forcing_annulus(cfg: SimConfig) -> np.ndarray:
    """Boolean mask of forced modes |k - k_f| <= delta_f (mean mode excluded)."""
    mask = _annulus_cached(cfg.grid_size, cfg.k_f, cfg.delta_f)
    if not mask.any():
        raise SimConfigError(
            f"empty forcing annulus: k_f={cfg.k_f}, delta_f={cfg.delta_f}, L={cfg.grid_size}"
        )
    return mask


@lru_cache(maxsize=32)
def _amplitude_cached(L: int, k_f: float, delta_f: float, eps_inject: float, dt: float) -> float:
    _, _, _, inv_k2, _, mult = _grids(L)
    mask = _annulus_cached(L, k_f, delta_f)
    s = float(np.sum(mask * inv_k2 * mult[None, :]))
    return L * np.sqrt(2.0 * eps_inject / (dt * s))


def forcing_amplitude(cfg: SimConfig) -> float:
    """Scale A such that white-in-time forcing A*mask*rfft2(randn) injects
    energy at rate eps_inject.

    Holding the forcing constant over a step contributes dt*F to zeta, so the
    mean energy gain per step is (dt^2/2) * sum_k E|c_k|^2 / k^2 with
    c = F_hat / L^2; solving rate = eps gives A below.
    """
    forcing_annulus(cfg)
    return _amplitude_cached(cfg.grid_size, cfg.k_f, cfg.delta_f, cfg.eps_inject, cfg.dt)


def refresh_forcing(state: SpectralState, cfg: SimConfig, rng: np.random.Generator) -> SpectralState:
    """Redraw the annulus forcing; Hermitian symmetry holds by construction
    because the draw is the rfft2 of real white noise."""
    L = cfg.grid_size
    mask = forcing_annulus(cfg)
    amp = forcing_amplitude(cfg)
    f_hat = np.fft.rfft2(rng.standard_normal((L, L))) * mask * amp
    return replace(state, forcing_hat=f_hat)


def kinetic_energy(zeta_hat: np.ndarray, L: int) -> float:
    """Mean kinetic energy 0.5 <|u|^2> from spectral vorticity."""
    _, _, _, inv_k2, _, mult = _grids(L)
    c2 = (np.abs(zeta_hat) / L**2) ** 2
    return 0.5 * float(np.sum(c2 * inv_k2 * mult[None, :]))


def enstrophy(zeta_hat: np.ndarray, L: int) -> float:
    """Mean enstrophy 0.5 <zeta^2>."""
    _, _, _, _, _, mult = _grids(L)
    c2 = (np.abs(zeta_hat) / L**2) ** 2
    return 0.5 * float(np.sum(c2 * mult[None, :]))


def expand_full_spectrum(zeta_hat: np.ndarray, L: int) -> np.ndarray:
    """Expand an rfft2 half-plane array to the full L x L complex spectrum."""
    full = np.zeros((L, L), complex)
    half = zeta_hat.shape[1]
    full[:, :half] = zeta_hat
    rows = (-np.arange(L)) % L
    cols = (-np.arange(half, L)) % L
    full[:, half:] = np.conj(zeta_hat[np.ix_(rows, cols)])
    return full


def simulate(cfg: SimConfig, progress: bool = False) -> TrajectoryDataset:
    """Integrate with stochastic forcing; discard the spinup, then save the
    real-space vorticity every ``subsample`` steps until ``n_frames`` frames
    are collected. Deterministic for a fixed seed.
    """
    rng = make_rng(cfg.seed)
    state = zero_state(cfg)
    L = cfg.grid_size
    frames = np.empty((cfg.n_frames, 1, L, L), dtype=np.float32)
    total = cfg.spinup_steps + cfg.n_frames * cfg.subsample
    saved = 0
    for i in range(total):
        state = refresh_forcing(state, cfg, rng)
        state = rk4_step(state, cfg, step=i)
        if i >= cfg.spinup_steps and (i - cfg.spinup_steps + 1) % cfg.subsample == 0:
            frames[saved, 0] = np.fft.irfft2(state.zeta_hat, s=(L, L)).astype(np.float32)
            saved += 1
        if progress and (i + 1) % 5000 == 0:
            print(f"  simulate: step {i + 1}/{total}, E={kinetic_energy(state.zeta_hat, L):.4f}")
    assert saved == cfg.n_frames
    return TrajectoryDataset(
        values=frames,
        dt_physical=cfg.dt * cfg.subsample,
        geometry="periodic_both",
        split="none",
    )


def energy_series(ds: TrajectoryDataset) -> np.ndarray:
    """Kinetic energy of every saved frame (for stationarity diagnostics)."""
    out = np.empty(len(ds))
    L = ds.width
    for n in range(len(ds)):
        out[n] = kinetic_energy(np.fft.rfft2(ds.values[n, 0].astype(np.float64)), L)
    return out


def stationarity_check(series: np.ndarray, window: int = 1000) -> dict[str, float]:
    """Trend-vs-scatter check on window means of a scalar series.

    Fits a straight line to the consecutive window means; the trend magnitude
    over the whole run must not exceed 3x the scatter (std) of the detrended
    window means. Returns the diagnostics plus a pass flag.
    """
    n_win = len(series) // window
    if n_win < 2:
        raise ValueError(f"need at least 2 windows of {window} samples")
    means = series[: n_win * window].reshape(n_win, window).mean(axis=1)
    x = np.arange(n_win, dtype=float)
    slope, intercept = np.polyfit(x, means, 1)
    resid = means - (slope * x + intercept)
    scatter = float(resid.std())
    trend = float(abs(slope) * (n_win - 1))
    return {
        "windows": float(n_win),
        "trend": trend,
        "scatter": scatter,
        "stationary": float(trend <= 3.0 * scatter),
    }
