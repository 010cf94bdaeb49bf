"""Shipped experiment presets and the pipeline configuration schema.

``vorticity-desk`` is the configuration the test suite actually runs: a
64x64 corpus, small networks, and evaluation sizes chosen to fit a CPU
budget. ``vorticity-paper`` records the published full-scale configuration
verbatim; it is far too expensive for CI and exists so the two protocols can
be diffed line by line. Attention-related options are carried as inert
metadata: the backbone here is attention-free, and the keys exist only so
the published table survives in runnable-config form.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import config as configio
from . import diffusion_core, discriminator, guided_sampler, spectral_sim

PRESET_NAMES = ("vorticity-desk", "vorticity-paper")

#: Every legal config key and its type. `validate` rejects anything else.
SCHEMA: dict[str, str] = {
    "run.seed": "int",
    # simulation / corpus
    "sim.grid_size": "int",
    "sim.dt": "float",
    "sim.nu": "float",
    "sim.hyper_order": "int",
    "sim.mu": "float",
    "sim.k_f": "float",
    "sim.delta_f": "float",
    "sim.eps_inject": "float",
    "sim.subsample": "int",
    "sim.spinup_steps": "int",
    "sim.n_train": "int",
    "sim.n_val": "int",
    "sim.n_test": "int",
    # denoiser training (one section serves the unconditional and the
    # conditional model; the pipeline flips score.mode when training the
    # latter)
    "score.mode": "str",
    "score.epochs": "int",
    "score.batch_size": "int",
    "score.lr": "float",
    "score.ema_rate": "float",
    "score.widths": "ints",
    "score.blocks_per_level": "int",
    "score.emb_dim": "int",
    "score.p_mean": "float",
    "score.p_std": "float",
    "score.sigma_data": "float",
    "score.attention_blocks": "int",        # recorded, never consumed
    "score.attention_resolution": "ints",   # recorded, never consumed
    # discriminator training; steps may be given directly or via epochs
    "disc.steps": "int",
    "disc.epochs": "int",
    "disc.batch_size": "int",
    "disc.lr": "float",
    "disc.ema_rate": "float",
    "disc.m": "int",
    "disc.mu_step": "float",
    "disc.sigma_step": "float",
    "disc.crop": "bool",
    "disc.widths": "ints",
    "disc.blocks_per_level": "int",
    "disc.emb_dim": "int",
    "disc.head_width": "int",
    "disc.attention_blocks": "int",         # recorded, never consumed
    "disc.attention_resolution": "ints",    # recorded, never consumed
    # reverse-process sampling
    "sampler.sigma_min": "float",
    "sampler.sigma_max": "float",
    "sampler.rho": "float",
    "sampler.steps": "int",
    "sampler.s_churn": "float",
    "sampler.s_noise": "float",
    "sampler.s_tmin": "float",
    "sampler.s_tmax": "float",
    "sampler.lambda": "float",
    # evaluation protocol
    "eval.rollout_steps": "int",
    "eval.forecasts": "int",
    "eval.members": "int",
    "eval.lead": "int",
    "eval.probe_samples": "int",
    "eval.acf_samples": "int",
    "eval.acf_max_lag": "int",
    "eval.disc_pairs": "int",
    "eval.disc_sigma": "float",
    "eval.bootstrap": "int",
}

_DESK = {
    "run.seed": "0",
    "sim.grid_size": "64",
    "sim.dt": "0.005",
    "sim.nu": "1e-4",
    "sim.hyper_order": "2",
    "sim.mu": "0.1",
    "sim.k_f": "6.0",
    "sim.delta_f": "1.5",
    "sim.eps_inject": "0.1",
    "sim.subsample": "4",
    "sim.spinup_steps": "10000",
    "sim.n_train": "4608",
    "sim.n_val": "256",
    "sim.n_test": "256",
    "score.mode": "uncond",
    "score.epochs": "24",
    "score.batch_size": "16",
    "score.lr": "1e-4",
    "score.ema_rate": "0.999",
    "score.widths": "32,64,64",
    "score.blocks_per_level": "2",
    "score.emb_dim": "128",
    "score.p_mean": "-1.2",
    "score.p_std": "1.2",
    "score.sigma_data": "0.5",
    "disc.steps": "12000",
    "disc.batch_size": "8",
    "disc.lr": "1e-4",
    "disc.ema_rate": "0.0",
    "disc.m": "1",
    "disc.mu_step": "1.0",
    "disc.sigma_step": "2.0",
    "disc.crop": "true",
    "disc.widths": "32,64",
    "disc.blocks_per_level": "2",
    "disc.emb_dim": "128",
    "disc.head_width": "1024",
    "sampler.sigma_min": "0.002",
    "sampler.sigma_max": "80",
    "sampler.rho": "7",
    "sampler.steps": "30",
    "sampler.s_churn": "55",
    "sampler.s_noise": "1.005",
    "sampler.s_tmin": "0",
    "sampler.s_tmax": "1000",
    # guidance strength calibrated at this grid/training scale: the dose-
    # response of predicted consistency saturates past ~150 and the published
    # strength barely moves the reverse process here
    "sampler.lambda": "150",
    "eval.rollout_steps": "1000",
    "eval.forecasts": "20",
    "eval.members": "8",
    "eval.lead": "10",
    "eval.probe_samples": "50",
    "eval.acf_samples": "500",
    "eval.acf_max_lag": "10",
    "eval.disc_pairs": "256",
    "eval.disc_sigma": "0.1",
    "eval.bootstrap": "1000",
}

# Published vorticity configuration. Training/sampling rows are verbatim;
# the corpus split sizes are not stated in the source and keep desk values.
_PAPER = dict(
    _DESK,
    **{
        "sim.grid_size": "256",
        "sim.nu": "2e-7",
        "sim.spinup_steps": "500",
        "sampler.lambda": "14",
        "score.epochs": "350",
        "score.batch_size": "2",
        "score.ema_rate": "0.9999",
        "score.widths": "128,256,256",
        "score.blocks_per_level": "3",
        "score.attention_blocks": "3",
        "score.attention_resolution": "8,4",
        "disc.epochs": "500",
        "disc.widths": "128,256,256",
        "disc.attention_blocks": "2",
        "disc.attention_resolution": "8,4",
        "sampler.steps": "50",
        "eval.rollout_steps": "4000",
        "eval.forecasts": "100",
        "eval.members": "50",
    },
)
del _PAPER["disc.steps"]  # derived from disc.epochs and the corpus size

_PRESETS = {"vorticity-desk": _DESK, "vorticity-paper": _PAPER}


def preset(name: str) -> dict[str, str]:
    """A fresh copy of a shipped preset's flat config mapping."""
    if name not in _PRESETS:
        raise configio.ConfigError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    return dict(_PRESETS[name])


def validate(mapping: dict[str, str]) -> dict[str, object]:
    """Schema-check a pipeline config (see :data:`SCHEMA`)."""
    return configio.validate(mapping, SCHEMA)


def stage_seed(master: int, stage: str) -> int:
    """Decorrelated per-stage seed derived from the run seed.

    Stages consume randomness in structurally different ways, so nothing
    breaks if two stages collide, but distinct streams keep artifacts
    independent when a stage is re-run in isolation.
    """
    ss = np.random.SeedSequence((int(master), zlib.crc32(stage.encode("ascii"))))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# builders: flat mapping -> module config objects
# ---------------------------------------------------------------------------

def sim_config(values: dict[str, str], seed: int, n_frames: int | None = None) -> spectral_sim.SimConfig:
    g = lambda key: configio.get_float(values, key)
    if n_frames is None:
        n_frames = (configio.get_int(values, "sim.n_train")
                    + configio.get_int(values, "sim.n_val")
                    + configio.get_int(values, "sim.n_test"))
    return spectral_sim.SimConfig(
        grid_size=configio.get_int(values, "sim.grid_size"),
        dt=g("sim.dt"),
        nu=g("sim.nu"),
        hyper_order=configio.get_int(values, "sim.hyper_order"),
        mu=g("sim.mu"),
        k_f=g("sim.k_f"),
        delta_f=g("sim.delta_f"),
        eps_inject=g("sim.eps_inject"),
        subsample=configio.get_int(values, "sim.subsample"),
        spinup_steps=configio.get_int(values, "sim.spinup_steps"),
        n_frames=n_frames,
        seed=seed,
    )


def score_train_config(values: dict[str, str], seed: int,
                       mode: str | None = None) -> diffusion_core.TrainConfig:
    return diffusion_core.TrainConfig(
        mode=mode if mode is not None else configio.get_str(values, "score.mode"),
        epochs=configio.get_int(values, "score.epochs"),
        batch_size=configio.get_int(values, "score.batch_size"),
        lr=configio.get_float(values, "score.lr"),
        ema_rate=configio.get_float(values, "score.ema_rate"),
        p_mean=configio.get_float(values, "score.p_mean"),
        p_std=configio.get_float(values, "score.p_std"),
        sigma_data=configio.get_float(values, "score.sigma_data"),
        widths=configio.get_int_tuple(values, "score.widths"),
        blocks_per_level=configio.get_int(values, "score.blocks_per_level"),
        emb_dim=configio.get_int(values, "score.emb_dim"),
        seed=seed,
    )


def disc_train_config(values: dict[str, str], seed: int,
                      n_train: int | None = None) -> discriminator.DiscTrainConfig:
    batch = configio.get_int(values, "disc.batch_size")
    if "disc.steps" in values:
        steps = configio.get_int(values, "disc.steps")
    elif "disc.epochs" in values:
        if n_train is None:
            raise configio.ConfigError(
                "disc.epochs needs the training set size to derive disc.steps")
        steps = configio.get_int(values, "disc.epochs") * max(n_train // batch, 1)
    else:
        raise configio.ConfigError("need disc.steps or disc.epochs")
    return discriminator.DiscTrainConfig(
        steps=steps,
        batch_size=batch,
        lr=configio.get_float(values, "disc.lr"),
        ema_rate=configio.get_float(values, "disc.ema_rate"),
        p_mean=configio.get_float(values, "score.p_mean"),
        p_std=configio.get_float(values, "score.p_std"),
        sigma_data=configio.get_float(values, "score.sigma_data"),
        m=configio.get_int(values, "disc.m"),
        mu_step=configio.get_float(values, "disc.mu_step"),
        sigma_step=configio.get_float(values, "disc.sigma_step"),
        crop=configio.get_bool(values, "disc.crop"),
        widths=configio.get_int_tuple(values, "disc.widths"),
        blocks_per_level=configio.get_int(values, "disc.blocks_per_level"),
        emb_dim=configio.get_int(values, "disc.emb_dim"),
        head_width=configio.get_int(values, "disc.head_width"),
        seed=seed,
    )


def sampler_config(values: dict[str, str], seed: int, guided: bool,
                   n_steps: int | None = None,
                   lam: float | None = None) -> guided_sampler.SamplerConfig:
    """A SamplerConfig with its noise schedule, honoring CLI overrides."""
    sched = diffusion_core.schedule(
        configio.get_float(values, "sampler.sigma_min"),
        configio.get_float(values, "sampler.sigma_max"),
        configio.get_float(values, "sampler.rho"),
        n_steps if n_steps is not None else configio.get_int(values, "sampler.steps"),
    )
    return guided_sampler.SamplerConfig(
        schedule=sched,
        s_churn=configio.get_float(values, "sampler.s_churn"),
        s_noise=configio.get_float(values, "sampler.s_noise"),
        s_tmin=configio.get_float(values, "sampler.s_tmin"),
        s_tmax=configio.get_float(values, "sampler.s_tmax"),
        lam=lam if lam is not None else configio.get_float(values, "sampler.lambda"),
        guided=guided,
        seed=seed,
    )
