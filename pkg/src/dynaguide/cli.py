"""Command-line pipeline: simulate, train, sample, forecast, evaluate.

Every artifact is an STDG container or a JSON report and records the
effective configuration hash plus git-style content hashes of its inputs, so
any output can be traced back to exactly the bytes and options that produced
it. Subcommands write only below ``--out`` (and, when set, the
``DYNAGUIDE_CACHE`` directory, which memoizes expensive stages keyed by
config, inputs, and seed).

Exit codes: 0 success, 2 usage error (argparse), 3 missing file, 4 invalid
configuration or data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as configio
from . import diffusion_core as dc
from . import discriminator as dsc
from . import field_core as fc
from . import guided_sampler as gs
from . import metrics, presets, spectral_sim

#: Batch size for unconditional sample generation; pinned so chunking does
#: not change the random stream consumed per chunk.
UNCOND_CHUNK = 25

_STAGE_NAMES = ("simulate", "train-score", "train-video", "train-disc",
                "sample", "forecast", "evaluate")


def blob_hash(path: str | Path) -> str:
    """Git-style content hash: sha256 over a ``blob <len>\\0`` framed payload."""
    data = Path(path).read_bytes()
    h = hashlib.sha256()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def _provenance(values: dict[str, str], inputs: dict[str, Path],
                seed: int, command: str) -> dict[str, str]:
    prov = {
        "command": command,
        "config_sha256": configio.config_hash(values),
        "seed": str(seed),
    }
    for name, path in sorted(inputs.items()):
        prov[f"input_{name}"] = blob_hash(path)
    return prov


# ---------------------------------------------------------------------------
# artifact cache
# ---------------------------------------------------------------------------

def _cache_key(name: str, prov: dict[str, str]) -> str:
    doc = json.dumps(prov, sort_keys=True)
    return f"{name}-{hashlib.sha256(doc.encode()).hexdigest()[:24]}"


def _cache_fetch(name: str, prov: dict[str, str], dest: Path) -> bool:
    root = os.environ.get("DYNAGUIDE_CACHE")
    if not root:
        return False
    src = Path(root) / _cache_key(name, prov)
    if not src.is_file():
        return False
    shutil.copyfile(src, dest)
    return True


def _cache_store(name: str, prov: dict[str, str], src: Path) -> None:
    root = os.environ.get("DYNAGUIDE_CACHE")
    if not root:
        return
    cache = Path(root)
    cache.mkdir(parents=True, exist_ok=True)
    tmp = cache / (_cache_key(name, prov) + ".tmp")
    shutil.copyfile(src, tmp)
    tmp.replace(cache / _cache_key(name, prov))


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------

def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_standardized(path: Path) -> fc.TrajectoryDataset:
    ds = fc.load_dataset(path)
    if ds.norm_stats is None:
        if ds.split == "train":
            return fc.standardize(ds)
        raise configio.ConfigError(
            f"{path} carries no normalization statistics; standardize it "
            "against the train split first")
    return ds


def _load_checkpoint(path: Path) -> dc.ModelCheckpoint:
    return dc.ModelCheckpoint.load(_require_file(path, "checkpoint"))


def _plain_denoiser(net, pre):
    def fn(x, t):
        with torch.no_grad():
            return dc.denoise(net, pre, x, t)
    return fn


def _state_from(ds: fc.TrajectoryDataset, idx: int) -> gs.RolloutState:
    """Conditioning window ending at frame ``idx`` (current, previous)."""
    return gs.RolloutState(current=ds.values[idx], previous=ds.values[idx - 1])


def _attach_stats(ds: fc.TrajectoryDataset, ref: fc.TrajectoryDataset) -> fc.TrajectoryDataset:
    """Mark generated frames with the training statistics they live in."""
    mean, std = ref.norm_stats
    return replace(ds, mean=mean, std=std)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def stage_simulate(out: Path, values: dict[str, str], master: int) -> None:
    seed = presets.stage_seed(master, "simulate")
    prov = _provenance(values, {}, seed, "simulate")
    names = ("train.stdg", "val.stdg", "test.stdg")
    if all((out / n).is_file() for n in names):
        print("simulate: outputs exist, skipping")
        return
    if all(_cache_fetch(n, prov, out / n) for n in names):
        print("simulate: cache hit")
        return
    cfg = presets.sim_config(values, seed)
    print(f"simulate: {cfg.n_frames} frames at {cfg.grid_size}^2")
    full = spectral_sim.simulate(cfg, progress=True)
    train, val, test = fc.split_dataset(
        full,
        configio.get_int(values, "sim.n_train"),
        configio.get_int(values, "sim.n_val"),
        configio.get_int(values, "sim.n_test"),
    )
    train = fc.standardize(train)
    val = fc.standardize(val, stats=train.norm_stats)
    test = fc.standardize(test, stats=train.norm_stats)
    for name, ds in zip(names, (train, val, test)):
        fc.save_dataset(out / name, ds, extra_meta=prov)
        _cache_store(name, prov, out / name)


def _train_score_common(out: Path, values: dict[str, str], master: int,
                        data: Path, mode: str, artifact: str, stage: str) -> None:
    seed = presets.stage_seed(master, stage)
    prov = _provenance(values, {"train": data}, seed, stage)
    dest = out / artifact
    if dest.is_file():
        print(f"{stage}: output exists, skipping")
        return
    if _cache_fetch(artifact, prov, dest):
        print(f"{stage}: cache hit")
        return
    ds = _load_standardized(data)
    cfg = presets.score_train_config(values, seed, mode=mode)
    print(f"{stage}: {cfg.epochs} epochs, batch {cfg.batch_size}, mode {cfg.mode}")
    ckpt = dc.train(cfg, ds, progress=lambda e, l: print(f"  epoch {e}: loss {l:.4f}"))
    ckpt.meta.update(prov)
    ckpt.save(dest)
    _cache_store(artifact, prov, dest)


def stage_train_score(out: Path, values: dict[str, str], master: int,
                      data: Path | None = None) -> None:
    _train_score_common(out, values, master, data or out / "train.stdg",
                        configio.get_str(values, "score.mode"),
                        "ckpt-score-uncond.stdg", "train-score")


def stage_train_video(out: Path, values: dict[str, str], master: int) -> None:
    _train_score_common(out, values, master, out / "train.stdg",
                        "cond", "ckpt-score-video.stdg", "train-video")


def stage_train_disc(out: Path, values: dict[str, str], master: int,
                     data: Path | None = None) -> None:
    data = data or out / "train.stdg"
    seed = presets.stage_seed(master, "train-disc")
    prov = _provenance(values, {"train": data}, seed, "train-disc")
    dest = out / "ckpt-disc.stdg"
    if dest.is_file():
        print("train-disc: output exists, skipping")
        return
    if _cache_fetch(dest.name, prov, dest):
        print("train-disc: cache hit")
        return
    ds = _load_standardized(data)
    cfg = presets.disc_train_config(values, seed, n_train=len(ds))
    print(f"train-disc: {cfg.steps} steps, batch {cfg.batch_size}")
    ckpt = dsc.train_discriminator(
        cfg, ds, progress=lambda s, l: print(f"  step {s}: loss {l:.4f}"))
    ckpt.meta.update(prov)
    ckpt.save(dest)
    _cache_store(dest.name, prov, dest)


def _consistency_probe_run(score_net, pre, disc, state, cfg, rng, sigma_min, sigma_data):
    """One conditioned generation; returns predicted consistency per step.

    The terminal state sits at sigma 0, outside the noise range the
    classifier ever trained on, so consistency is read at
    max(t, sigma_min).
    """
    cond = torch.from_numpy(
        np.concatenate([state.current, state.previous], axis=0)[None])
    qs = []

    def probe(info):
        x = torch.from_numpy(info["x"])
        sig = max(float(info["t"]), sigma_min)
        q = dsc.predict(disc, x, cond, sig, sigma_data=sigma_data)
        qs.append(float(q[0]))

    gs.sample_next(score_net, pre, state, cfg,
                   disc=disc if cfg.guided else None, rng=rng, probe=probe)
    return np.array(qs, dtype=np.float32)


def stage_sample(out: Path, values: dict[str, str], master: int) -> None:
    ckpt_u = out / "ckpt-score-uncond.stdg"
    ckpt_v = out / "ckpt-score-video.stdg"
    ckpt_d = out / "ckpt-disc.stdg"
    train_p, test_p = out / "train.stdg", out / "test.stdg"
    sigma_data = configio.get_float(values, "score.sigma_data")
    sigma_min = configio.get_float(values, "sampler.sigma_min")
    rollout_steps = configio.get_int(values, "eval.rollout_steps")
    pre = dc.Preconditioner(sigma_data)

    test = _load_standardized(test_p)
    init = _state_from(test, 1)
    h, w = test.height, test.width

    def emit(name, build):
        dest = out / name
        seed = presets.stage_seed(master, name)
        prov = _provenance(values, {
            "train": train_p, "test": test_p, "score_uncond": ckpt_u,
            "score_video": ckpt_v, "disc": ckpt_d}, seed, "sample")
        if dest.is_file():
            print(f"sample: {name} exists, skipping")
            return
        if _cache_fetch(name, prov, dest):
            print(f"sample: {name} cache hit")
            return
        build(dest, seed, prov)
        _cache_store(name, prov, dest)

    def build_guided(dest, seed, prov):
        net = _load_checkpoint(ckpt_u).build_net()
        disc = _load_checkpoint(ckpt_d).build_net()
        cfg = presets.sampler_config(values, seed, guided=True)
        print(f"sample: guided rollout, {rollout_steps} steps")
        traj = gs.rollout(net, pre, init, rollout_steps, cfg, disc=disc,
                          dt_physical=test.dt_physical,
                          progress=lambda i, x: print(f"  frame {i}/{rollout_steps}")
                          if i % 100 == 0 else None)
        fc.save_dataset(dest, _attach_stats(traj, test), extra_meta=prov)

    def build_video(dest, seed, prov):
        net = _load_checkpoint(ckpt_v).build_net()
        cfg = presets.sampler_config(values, seed, guided=False)
        print(f"sample: video rollout, {rollout_steps} steps")
        traj = gs.rollout(net, pre, init, rollout_steps, cfg,
                          dt_physical=test.dt_physical,
                          progress=lambda i, x: print(f"  frame {i}/{rollout_steps}")
                          if i % 100 == 0 else None)
        fc.save_dataset(dest, _attach_stats(traj, test), extra_meta=prov)

    def build_uncond(dest, seed, prov):
        net = _load_checkpoint(ckpt_u).build_net()
        if net.in_channels != 1:
            raise configio.ConfigError(
                "unconditional sampling needs the unconditional checkpoint")
        cfg = presets.sampler_config(values, seed, guided=False)
        n = configio.get_int(values, "eval.acf_samples")
        print(f"sample: {n} unconditional samples")
        fn = _plain_denoiser(net, pre)
        chunks = []
        for start in range(0, n, UNCOND_CHUNK):
            b = min(UNCOND_CHUNK, n - start)
            rng = fc.derive_rng(seed, start)
            chunks.append(np.asarray(gs.generate(fn, (b, 1, h, w), cfg, rng=rng)))
        ds = fc.TrajectoryDataset(values=np.concatenate(chunks).astype(np.float32),
                                  dt_physical=test.dt_physical,
                                  geometry=test.geometry, split="none")
        fc.save_dataset(dest, _attach_stats(ds, test), extra_meta=prov)

    def build_probes(guided: bool):
        def build(dest, seed, prov):
            net = _load_checkpoint(ckpt_u).build_net()
            disc = _load_checkpoint(ckpt_d).build_net()
            cfg = presets.sampler_config(values, seed, guided=guided)
            n = configio.get_int(values, "eval.probe_samples")
            stride = max((len(test) - 2) // n, 1)
            print(f"sample: consistency probes, guided={'on' if guided else 'off'}, "
                  f"{n} samples")
            rows = []
            for s in range(n):
                state = _state_from(test, 1 + s * stride)
                rows.append(_consistency_probe_run(
                    net, pre, disc, state, cfg, fc.derive_rng(seed, s),
                    sigma_min, sigma_data))
            meta = dict(prov)
            meta["kind"] = "consistency-probes"
            meta["sigmas"] = ",".join(repr(float(t)) for t in cfg.schedule.sigmas[1:])
            fc.write_container(dest, np.stack(rows), meta)
        return build

    emit("rollout-guided.stdg", build_guided)
    emit("rollout-video.stdg", build_video)
    emit("samples-uncond.stdg", build_uncond)
    emit("probes-guided.stdg", build_probes(True))
    emit("probes-unguided.stdg", build_probes(False))


def _forecast_starts(n_frames: int, lead: int, forecasts: int) -> np.ndarray:
    """Evenly spaced start indices with room for the window and the truth."""
    lo, hi = 1, n_frames - 1 - lead
    if hi < lo:
        raise configio.ConfigError(
            f"dataset too short for lead {lead}: {n_frames} frames")
    starts = np.unique(np.linspace(lo, hi, forecasts).round().astype(int))
    if len(starts) < forecasts:
        raise configio.ConfigError(
            f"cannot place {forecasts} distinct forecasts in {n_frames} frames")
    return starts


def _run_forecast(net, pre, disc, ds, starts, members, lead, cfg) -> metrics.EnsembleForecast:
    inits = [_state_from(ds, int(i)) for i in starts]
    truth = np.stack([ds.values[i + 1:i + 1 + lead, 0] for i in starts])
    return gs.ensemble_forecast(
        net, pre, inits, members, lead, cfg, truth, disc=disc,
        dt_physical=ds.dt_physical,
        progress=lambda f: print(f"  forecast {f + 1}/{len(inits)}"))


def stage_forecast(out: Path, values: dict[str, str], master: int) -> None:
    ckpt_u, ckpt_v = out / "ckpt-score-uncond.stdg", out / "ckpt-score-video.stdg"
    ckpt_d, test_p = out / "ckpt-disc.stdg", out / "test.stdg"
    test = _load_standardized(test_p)
    members = configio.get_int(values, "eval.members")
    lead = configio.get_int(values, "eval.lead")
    forecasts = configio.get_int(values, "eval.forecasts")
    starts = _forecast_starts(len(test), lead, forecasts)
    pre = dc.Preconditioner(configio.get_float(values, "score.sigma_data"))

    def emit(name, ckpt_path, guided):
        dest = out / name
        seed = presets.stage_seed(master, name)
        prov = _provenance(values, {
            "test": test_p, "score": ckpt_path, "disc": ckpt_d}, seed, "forecast")
        if dest.is_file():
            print(f"forecast: {name} exists, skipping")
            return
        if _cache_fetch(name, prov, dest):
            print(f"forecast: {name} cache hit")
            return
        net = _load_checkpoint(ckpt_path).build_net()
        disc = _load_checkpoint(ckpt_d).build_net() if guided else None
        cfg = presets.sampler_config(values, seed, guided=guided)
        print(f"forecast: {name}: {len(starts)} x {members} members x {lead} leads")
        ens = _run_forecast(net, pre, disc, test, starts, members, lead, cfg)
        meta = dict(prov)
        meta["kind"] = "forecast-ensemble"
        meta["starts"] = ",".join(str(int(i)) for i in starts)
        fc.write_container(dest, ens.values, meta)
        _cache_store(name, prov, dest)

    emit("forecast-guided.stdg", ckpt_u, True)
    emit("forecast-video.stdg", ckpt_v, False)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _check_grids(name_a: str, a: tuple, name_b: str, b: tuple) -> None:
    if a != b:
        raise configio.ConfigError(
            f"grid shape mismatch: {name_a} {a} vs {name_b} {b}")


def _bootstrap_abs_bias(frames: np.ndarray, reference: float, n_boot: int,
                        rng: np.random.Generator) -> tuple[float, float, float]:
    """|mean - reference| with a percentile CI over frame resampling."""
    means = frames.reshape(len(frames), -1).mean(axis=1)
    point = abs(float(means.mean()) - reference)
    idx = rng.integers(0, len(means), size=(n_boot, len(means)))
    boots = np.abs(means[idx].mean(axis=1) - reference)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return point, float(lo), float(hi)


def _monotone_nondecreasing(curve: np.ndarray) -> bool:
    return bool(np.all(np.diff(curve) >= -1e-9 * max(abs(curve).max(), 1.0)))


def stage_evaluate(out: Path, values: dict[str, str], master: int,
                   artifacts: Path | None = None) -> Path:
    art = artifacts or out
    names = ["train.stdg", "test.stdg", "ckpt-disc.stdg", "rollout-guided.stdg",
             "rollout-video.stdg", "samples-uncond.stdg", "probes-guided.stdg",
             "probes-unguided.stdg", "forecast-guided.stdg", "forecast-video.stdg"]
    paths = {n: _require_file(art / n, n) for n in names}
    seed = presets.stage_seed(master, "evaluate")

    train = _load_standardized(paths["train.stdg"])
    test = _load_standardized(paths["test.stdg"])
    guided = fc.load_dataset(paths["rollout-guided.stdg"])
    video = fc.load_dataset(paths["rollout-video.stdg"])
    uncond = fc.load_dataset(paths["samples-uncond.stdg"])
    for name, ds in (("guided rollout", guided), ("video rollout", video),
                     ("unconditional samples", uncond)):
        _check_grids(name, (ds.height, ds.width), "truth", (test.height, test.width))

    report = metrics.MetricReport(provenance={
        "command": "evaluate",
        "config": dict(sorted(values.items())),
        "config_sha256": configio.config_hash(values),
        "seed": str(master),
        "inputs": {n: blob_hash(p) for n, p in sorted(paths.items())},
    })

    # classifier quality on held-out data, and the shuffled-order control
    disc = _load_checkpoint(paths["ckpt-disc.stdg"]).build_net()
    m = configio.get_int(values, "disc.m")
    disc_eval = dsc.evaluate_discriminator(
        disc, test, sigma=configio.get_float(values, "eval.disc_sigma"),
        n_pairs=configio.get_int(values, "eval.disc_pairs"), m=m,
        sigma_data=configio.get_float(values, "score.sigma_data"),
        seed=presets.stage_seed(master, "disc-eval"))
    perm = fc.make_rng(presets.stage_seed(master, "disc-shuffle")).permutation(len(test))
    shuffled = replace(test, values=test.values[perm])
    disc_shuf = dsc.evaluate_discriminator(
        disc, shuffled, sigma=configio.get_float(values, "eval.disc_sigma"),
        n_pairs=configio.get_int(values, "eval.disc_pairs"), m=m,
        sigma_data=configio.get_float(values, "score.sigma_data"),
        seed=presets.stage_seed(master, "disc-eval"))
    report.add_scalar("disc_auc", disc_eval["auc"])
    report.add_scalar("disc_mean_q_pos", disc_eval["mean_q_pos"])
    report.add_scalar("disc_mean_q_neg", disc_eval["mean_q_neg"])
    report.add_scalar("disc_shuffled_auc", disc_shuf["auc"])
    report.add_scalar("disc_shuffled_accuracy", disc_shuf["accuracy"])
    report.add_scalar("disc_shuffled_pvalue", disc_shuf["chance_pvalue"])

    # consistency probes along the reverse process
    q_guided, _ = fc.read_container(paths["probes-guided.stdg"])
    q_unguided, _ = fc.read_container(paths["probes-unguided.stdg"])
    tail = max(q_guided.shape[1] // 10, 1)
    report.add_array("probe_q_guided", q_guided.mean(axis=0))
    report.add_array("probe_q_unguided", q_unguided.mean(axis=0))
    report.add_scalar("probe_guided_tail_min", q_guided.mean(axis=0)[-tail:].min())
    report.add_scalar("probe_unguided_tail_max", q_unguided.mean(axis=0)[-tail:].max())

    # temporal autocorrelation
    max_lag = configio.get_int(values, "eval.acf_max_lag")
    acf_truth = metrics.acf(test.values[:, 0], max_lag=max_lag)
    acf_guided = metrics.acf(guided.values[:, 0], max_lag=max_lag)
    acf_video = metrics.acf(video.values[:, 0], max_lag=max_lag)
    acf_uncond = metrics.acf(uncond.values[:, 0], max_lag=max_lag)
    for name, arr in (("truth", acf_truth), ("guided", acf_guided),
                      ("video", acf_video), ("uncond", acf_uncond)):
        report.add_array(f"acf_{name}", arr)
        report.add_scalar(f"acf_lag1_{name}", arr[1])

    # rollout stability relative to the training distribution
    finite = bool(np.isfinite(guided.values).all())
    frame_std = guided.values.reshape(len(guided), -1).std(axis=1)
    ref_std = float(train.values.reshape(len(train), -1).std(axis=1).mean())
    ratio = frame_std / ref_std
    report.add_scalar("rollout_all_finite", 1.0 if finite else 0.0)
    report.add_scalar("frame_std_ratio_min", ratio.min())
    report.add_scalar("frame_std_ratio_max", ratio.max())

    # global-mean bias of long rollouts, with bootstrap CIs over frames
    n_boot = configio.get_int(values, "eval.bootstrap")
    ref_mean = float(test.values.mean())
    rng = fc.make_rng(presets.stage_seed(master, "bootstrap"))
    bias_g, lo_g, hi_g = _bootstrap_abs_bias(guided.values, ref_mean, n_boot, rng)
    bias_v, lo_v, hi_v = _bootstrap_abs_bias(video.values, ref_mean, n_boot, rng)
    report.add_scalar("bias_guided", bias_g)
    report.add_scalar("bias_guided_lo", lo_g)
    report.add_scalar("bias_guided_hi", hi_g)
    report.add_scalar("bias_video", bias_v)
    report.add_scalar("bias_video_lo", lo_v)
    report.add_scalar("bias_video_hi", hi_v)
    report.add_scalar("bias_ordering_inverted", 0.0 if bias_g <= bias_v else 1.0)
    if bias_g > bias_v:
        print("note: guided rollout bias exceeds the conditional baseline "
              f"({bias_g:.4f} > {bias_v:.4f}); flagged, not failed")

    # probabilistic forecast verification
    lead = configio.get_int(values, "eval.lead")
    for name in ("guided", "video"):
        vals, meta = fc.read_container(paths[f"forecast-{name}.stdg"])
        starts = [int(s) for s in meta["starts"].split(",")]
        truth = np.stack([test.values[i + 1:i + 1 + lead, 0] for i in starts])
        _check_grids(f"forecast-{name}", tuple(vals.shape[-2:]),
                     "truth", tuple(truth.shape[-2:]))
        ens = metrics.EnsembleForecast(values=vals, truth=truth)
        crps = metrics.crps_curve(ens)
        ssr = np.array([metrics.spread_skill_ratio(ens, j) for j in range(lead)])
        report.add_array(f"crps_{name}", crps)
        report.add_array(f"ssr_{name}", ssr)
        report.add_scalar(f"crps_{name}_monotone",
                          1.0 if _monotone_nondecreasing(crps) else 0.0)

    dest = out / "report.json"
    report.save(dest)
    print(f"report sha256: {report.sha256()}")
    return dest


_STAGE_FNS = {
    "simulate": stage_simulate,
    "train-score": stage_train_score,
    "train-video": stage_train_video,
    "train-disc": stage_train_disc,
    "sample": stage_sample,
    "forecast": stage_forecast,
    "evaluate": stage_evaluate,
}


# ---------------------------------------------------------------------------
# subcommand entry points
# ---------------------------------------------------------------------------

def _effective_config(args, overrides: dict[str, str] | None = None) -> dict[str, str]:
    base = presets.preset(getattr(args, "name", None) or "vorticity-desk")
    layers = []
    if args.config is not None:
        layers.append(configio.load_config(args.config))
    flags: dict[str, str] = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        flags["run.seed"] = str(args.seed)
    if getattr(args, "lam", None) is not None:
        flags["sampler.lambda"] = repr(args.lam)
    if getattr(args, "steps", None) is not None:
        flags["sampler.steps"] = str(args.steps)
    if getattr(args, "members", None) is not None:
        flags["eval.members"] = str(args.members)
    if getattr(args, "forecasts", None) is not None:
        flags["eval.forecasts"] = str(args.forecasts)
    if getattr(args, "lead", None) is not None:
        flags["eval.lead"] = str(args.lead)
    layers.append(flags)
    values = configio.merge(base, *layers)
    presets.validate(values)
    return values


def _outdir(args) -> Path:
    if args.out is None:
        raise configio.ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _master_seed(values: dict[str, str]) -> int:
    return configio.get_int(values, "run.seed")


def cmd_simulate(args) -> int:
    values = _effective_config(args)
    stage_simulate(_outdir(args), values, _master_seed(values))
    return 0


def cmd_train_score(args) -> int:
    values = _effective_config(args)
    data = _require_file(args.data, "dataset")
    stage_train_score(_outdir(args), values, _master_seed(values), data=data)
    return 0


def cmd_train_disc(args) -> int:
    values = _effective_config(args)
    data = _require_file(args.data, "dataset")
    stage_train_disc(_outdir(args), values, _master_seed(values), data=data)
    return 0


def cmd_sample(args) -> int:
    values = _effective_config(args)
    out = _outdir(args)
    master = _master_seed(values)
    guided = args.guided != "off"
    score = _load_checkpoint(Path(args.score))
    ds = _load_standardized(_require_file(args.data, "dataset"))
    if len(ds) < 2:
        raise configio.ConfigError("need at least two frames to condition on")
    disc = None
    if guided:
        if args.disc is None:
            raise configio.ConfigError("guided sampling requires a discriminator checkpoint")
        disc = _load_checkpoint(Path(args.disc)).build_net()
    seed = presets.stage_seed(master, "sample")
    cfg = presets.sampler_config(values, seed, guided=guided)
    steps = configio.get_int(values, "eval.rollout_steps")
    pre = dc.Preconditioner(configio.get_float(values, "score.sigma_data"))
    print(f"sample: {steps} frames, guided={'on' if guided else 'off'}")
    traj = gs.rollout(score.build_net(), pre, _state_from(ds, len(ds) - 1), steps,
                      cfg, disc=disc, dt_physical=ds.dt_physical,
                      progress=lambda i, x: print(f"  frame {i}/{steps}")
                      if i % 100 == 0 else None)
    prov = _provenance(values, {"score": Path(args.score), "data": Path(args.data)},
                       seed, "sample")
    fc.save_dataset(out / "rollout.stdg", _attach_stats(traj, ds), extra_meta=prov)
    return 0


def cmd_forecast(args) -> int:
    values = _effective_config(args)
    out = _outdir(args)
    master = _master_seed(values)
    guided = args.guided != "off"
    score = _load_checkpoint(Path(args.score))
    ds = _load_standardized(_require_file(args.data, "dataset"))
    disc = None
    if guided:
        if args.disc is None:
            raise configio.ConfigError("guided sampling requires a discriminator checkpoint")
        disc = _load_checkpoint(Path(args.disc)).build_net()
    members = configio.get_int(values, "eval.members")
    lead = configio.get_int(values, "eval.lead")
    starts = _forecast_starts(len(ds), lead, configio.get_int(values, "eval.forecasts"))
    seed = presets.stage_seed(master, "forecast")
    cfg = presets.sampler_config(values, seed, guided=guided)
    pre = dc.Preconditioner(configio.get_float(values, "score.sigma_data"))
    print(f"forecast: {len(starts)} x {members} members x {lead} leads")
    ens = _run_forecast(score.build_net(), pre, disc, ds, starts, members, lead, cfg)
    prov = _provenance(values, {"score": Path(args.score), "data": Path(args.data)},
                       seed, "forecast")
    meta = dict(prov)
    meta["kind"] = "forecast-ensemble"
    meta["starts"] = ",".join(str(int(i)) for i in starts)
    fc.write_container(out / "forecast.stdg", ens.values, meta)
    report = metrics.MetricReport(provenance=prov)
    report.add_array("crps", metrics.crps_curve(ens))
    report.add_array("ssr", [metrics.spread_skill_ratio(ens, j) for j in range(lead)])
    report.save(out / "forecast-report.json")
    print(f"report sha256: {report.sha256()}")
    return 0


def cmd_evaluate(args) -> int:
    values = _effective_config(args)
    art = Path(args.artifacts)
    if not art.is_dir():
        raise FileNotFoundError(f"artifact directory not found: {art}")
    stage_evaluate(_outdir(args), values, _master_seed(values), artifacts=art)
    return 0


def cmd_preset(args) -> int:
    values = _effective_config(args)
    if args.stage is None:
        sys.stdout.write(configio.format_config(values))
        return 0
    out = _outdir(args)
    master = _master_seed(values)
    stages = _STAGE_NAMES if args.stage == "all" else (args.stage,)
    for name in stages:
        _STAGE_FNS[name](out, values, master)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _formatter(prog):
    return argparse.HelpFormatter(prog, width=88)


def _add_common(p, *, io=True):
    if io:
        p.add_argument("--out", metavar="DIR", help="output directory (all writes go here)")
    p.add_argument("--config", metavar="FILE",
                   help="key=value config file layered over the preset")
    p.add_argument("--seed", type=int, metavar="N", help="master run seed")
    p.add_argument("--threads", type=int, default=1, metavar="N",
                   help="torch intra-op thread cap (default 1, for determinism)")


def _add_sampling(p):
    p.add_argument("--lambda", dest="lam", type=float, metavar="X",
                   help="guidance strength")
    p.add_argument("--steps", type=int, metavar="N", help="reverse-process steps")
    p.add_argument("--guided", choices=("on", "off"), default="on",
                   help="classifier guidance (default on)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynaguide",
        description="Turbulence corpus generation, diffusion training, "
                    "consistency-guided sampling, and forecast verification.",
        formatter_class=_formatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("simulate", formatter_class=_formatter,
                       help="integrate the flow and write train/val/test splits")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-score", formatter_class=_formatter,
                       help="train a denoiser (score.mode selects conditioning)")
    p.add_argument("data", help="training split (STDG)")
    _add_common(p)
    p.set_defaults(func=cmd_train_score)

    p = sub.add_parser("train-disc", formatter_class=_formatter,
                       help="train the time-consistency classifier")
    p.add_argument("data", help="training split (STDG)")
    _add_common(p)
    p.set_defaults(func=cmd_train_disc)

    p = sub.add_parser("sample", formatter_class=_formatter,
                       help="autoregressive rollout from a dataset's last frames")
    p.add_argument("score", help="denoiser checkpoint")
    p.add_argument("data", help="dataset supplying the initial window")
    p.add_argument("disc", nargs="?", help="classifier checkpoint (for --guided on)")
    _add_common(p)
    _add_sampling(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("forecast", formatter_class=_formatter,
                       help="ensemble forecasts verified against the dataset")
    p.add_argument("score", help="denoiser checkpoint")
    p.add_argument("data", help="dataset supplying windows and truth")
    p.add_argument("disc", nargs="?", help="classifier checkpoint (for --guided on)")
    _add_common(p)
    _add_sampling(p)
    p.add_argument("--members", type=int, metavar="N", help="ensemble size")
    p.add_argument("--forecasts", type=int, metavar="N", help="number of start windows")
    p.add_argument("--lead", type=int, metavar="N", help="lead steps per forecast")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", formatter_class=_formatter,
                       help="score a pipeline directory into report.json")
    p.add_argument("artifacts", help="directory produced by the pipeline stages")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("preset", formatter_class=_formatter,
                       help="print a shipped preset, or run its pipeline stages")
    p.add_argument("name", choices=presets.PRESET_NAMES, help="preset name")
    p.add_argument("--stage", choices=("all",) + _STAGE_NAMES,
                   help="run this stage (or 'all'); omit to print the config")
    _add_common(p)
    p.set_defaults(func=cmd_preset)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        torch.set_num_threads(max(args.threads, 1))
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, gs.SamplerError, dsc.DiscriminatorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
