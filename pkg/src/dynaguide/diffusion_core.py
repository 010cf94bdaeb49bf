"""Denoising diffusion core: noise schedule, preconditioning, loss, training.

The denoiser D(x; sigma) wraps a raw network f as

    D(x; sigma) = c_skip(sigma) * x + c_out(sigma) * f(c_in(sigma) * x, c_noise(sigma))

with the coefficient closed forms fixed by sigma_data, so the network always
sees unit-variance inputs and a well-scaled target. Training draws noise
levels log-normally, ln sigma ~ N(P_mean, P_std^2), and minimizes the
weighted denoising MSE. All randomness comes from explicit numpy generators;
torch is used for the network forward/backward passes only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from dynaguide import networks
from dynaguide.field_core import TrajectoryDataset, make_rng, read_container, write_container


class DiffusionConfigError(ValueError):
    """Invalid schedule/training configuration."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: "ModelCheckpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric-like sigma ladder with an appended terminal zero."""

    sigma_min: float
    sigma_max: float
    rho: float
    n_steps: int
    sigmas: np.ndarray

    def __len__(self) -> int:
        return self.n_steps


def schedule(sigma_min: float, sigma_max: float, rho: float, n_steps: int) -> NoiseSchedule:
    """sigma_i = (max^(1/rho) + i/(N-1) (min^(1/rho) - max^(1/rho)))^rho, i < N,
    then sigma_N = 0. Endpoints are assigned exactly."""
    if not 0 < sigma_min < sigma_max:
        raise DiffusionConfigError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho <= 0:
        raise DiffusionConfigError("rho must be positive")
    if n_steps < 2:
        raise DiffusionConfigError("need at least 2 steps")
    i = np.arange(n_steps, dtype=np.float64)
    a = sigma_max ** (1.0 / rho)
    b = sigma_min ** (1.0 / rho)
    sig = (a + i / (n_steps - 1) * (b - a)) ** rho
    sig[0] = sigma_max
    sig[-1] = sigma_min
    sigmas = np.append(sig, 0.0)
    sigmas.setflags(write=False)
    return NoiseSchedule(sigma_min, sigma_max, rho, n_steps, sigmas)


@dataclass(frozen=True)
class Preconditioner:
    """Closed-form scaling coefficients parameterized by sigma_data.

    Written with power/division operators only so the same expressions serve
    scalars, numpy arrays and autograd tensors.
    """

    sigma_data: float = 0.5

    def c_skip(self, sigma):
        return self.sigma_data**2 / (sigma**2 + self.sigma_data**2)

    def c_out(self, sigma):
        return sigma * self.sigma_data / (sigma**2 + self.sigma_data**2) ** 0.5

    def c_in(self, sigma):
        return 1.0 / (sigma**2 + self.sigma_data**2) ** 0.5

    def c_noise(self, sigma):
        if torch.is_tensor(sigma):
            return torch.log(sigma) / 4.0
        return np.log(sigma) / 4.0

    def loss_weight(self, sigma):
        return (sigma**2 + self.sigma_data**2) / (sigma * self.sigma_data) ** 2


def _sigma_tensor(sigma, batch: int) -> torch.Tensor:
    t = torch.as_tensor(sigma).reshape(-1)
    if not t.is_floating_point():
        t = t.float()
    if t.numel() == 1:
        t = t.expand(batch)
    if t.numel() != batch:
        raise DiffusionConfigError(f"sigma has {t.numel()} entries for batch {batch}")
    if not torch.all(t > 0):
        raise DiffusionConfigError("sigma must be positive")
    return t


def denoise(net: networks.ScoreUNet, pre: Preconditioner, x: torch.Tensor,
            sigma, cond: torch.Tensor | None = None) -> torch.Tensor:
    """Preconditioned denoised estimate D(x; sigma), optionally conditioned
    on clean history frames concatenated channel-wise after input scaling."""
    if x.ndim != 4:
        raise DiffusionConfigError(f"x must be (B, C, H, W), got shape {tuple(x.shape)}")
    b = x.shape[0]
    sig = _sigma_tensor(sigma, b).to(x.dtype)
    cond_ch = net.in_channels - x.shape[1]
    if cond_ch == 0:
        if cond is not None:
            raise DiffusionConfigError("unconditional network given conditioning frames")
    else:
        if cond is None:
            raise DiffusionConfigError(f"network expects {cond_ch} conditioning channels")
        if cond.shape != (b, cond_ch) + x.shape[2:]:
            raise DiffusionConfigError(
                f"conditioning shape {tuple(cond.shape)} incompatible with {tuple(x.shape)}"
            )
    s = sig.reshape(b, 1, 1, 1)
    c_skip = pre.c_skip(s)
    c_out = pre.c_out(s)
    c_in = pre.c_in(s)
    c_noise = pre.c_noise(sig)
    inp = c_in * x
    if cond is not None:
        inp = torch.cat([inp, cond.to(x.dtype)], dim=1)
    return c_skip * x + c_out * net(inp, c_noise)


def score_from_denoise(denoised: torch.Tensor, x: torch.Tensor, sigma) -> torch.Tensor:
    """score(x; sigma) = (D(x) - x) / sigma^2."""
    sig = _sigma_tensor(sigma, x.shape[0]).to(x.dtype).reshape(-1, 1, 1, 1)
    return (denoised - x) / sig**2


def draw_sigmas(rng: np.random.Generator, batch: int, p_mean: float, p_std: float) -> np.ndarray:
    return np.exp(rng.normal(p_mean, p_std, batch))


def training_loss(net, pre: Preconditioner, clean: torch.Tensor, rng: np.random.Generator,
                  p_mean: float = -1.2, p_std: float = 1.2,
                  cond: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted denoising loss on one batch of clean frames.

    Noise levels and the additive noise come from the numpy generator so the
    training stream is independent of torch RNG state.
    """
    b = clean.shape[0]
    sigma = draw_sigmas(rng, b, p_mean, p_std)
    eps = rng.standard_normal(tuple(clean.shape)) * sigma.reshape(-1, 1, 1, 1)
    noisy = clean + torch.as_tensor(eps, dtype=clean.dtype)
    denoised = denoise(net, pre, noisy, sigma, cond=cond)
    w = torch.as_tensor(pre.loss_weight(sigma), dtype=clean.dtype)
    per_sample = ((denoised - clean) ** 2).mean(dim=(1, 2, 3))
    loss = (w * per_sample).mean()
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at sigmas {np.array2string(sigma, precision=4)}", None
        )
    return loss


@dataclass
class ModelCheckpoint:
    """Flat-vector snapshot of a model plus its optimizer and EMA state."""

    descriptor: str
    params: np.ndarray
    ema: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int
    ema_rate: float
    meta: dict = field(default_factory=dict)

    def build_net(self, use_ema: bool = True) -> torch.nn.Module:
        net = networks.build_network(self.descriptor)
        networks.load_parameter_vector(net, self.ema if use_ema else self.params)
        return net

    def save(self, path) -> None:
        payload = np.stack([
            self.params, self.ema, self.exp_avg, self.exp_avg_sq
        ]).astype(np.float32)
        meta = {
            "kind": "checkpoint",
            "descriptor": self.descriptor,
            "step": str(self.step),
            "ema_rate": repr(float(self.ema_rate)),
        }
        for k, v in self.meta.items():
            meta[f"cfg_{k}"] = str(v)
        write_container(path, payload, meta)

    @staticmethod
    def load(path) -> "ModelCheckpoint":
        payload, meta = read_container(path)
        if meta.get("kind") != "checkpoint":
            raise DiffusionConfigError(f"not a checkpoint container: {meta.get('kind')!r}")
        if payload.ndim != 2 or payload.shape[0] != 4:
            raise DiffusionConfigError(f"bad checkpoint payload shape {payload.shape}")
        cfg = {k[4:]: v for k, v in meta.items() if k.startswith("cfg_")}
        return ModelCheckpoint(
            descriptor=meta["descriptor"],
            params=payload[0], ema=payload[1], exp_avg=payload[2], exp_avg_sq=payload[3],
            step=int(meta["step"]), ema_rate=float(meta["ema_rate"]), meta=cfg,
        )


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "uncond"            # "uncond" or "cond"
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    ema_rate: float = 0.999
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    widths: tuple = (32, 64, 64)
    blocks_per_level: int = 2
    emb_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("uncond", "cond"):
            raise DiffusionConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise DiffusionConfigError("bad epochs/batch_size")
        if not 0 <= self.ema_rate < 1:
            raise DiffusionConfigError("ema_rate must be in [0, 1)")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise DiffusionConfigError("widths needs at least two levels")


def adam_state_vectors(net, opt) -> tuple[np.ndarray, np.ndarray]:
    """Flatten AdamW first/second-moment state in parameter order."""
    n = networks.parameter_count(net)
    exp_avg = np.zeros(n, dtype=np.float32)
    exp_avg_sq = np.zeros(n, dtype=np.float32)
    off = 0
    for p in net.parameters():
        st = opt.state.get(p)
        k = p.numel()
        if st:
            exp_avg[off : off + k] = st["exp_avg"].reshape(-1).numpy()
            exp_avg_sq[off : off + k] = st["exp_avg_sq"].reshape(-1).numpy()
        off += k
    return exp_avg, exp_avg_sq


def _snapshot(net, opt, descriptor, step, cfg: TrainConfig, ema: torch.Tensor,
              extra: dict) -> ModelCheckpoint:
    params = networks.parameter_vector(net)
    exp_avg, exp_avg_sq = adam_state_vectors(net, opt)
    meta = {
        "mode": cfg.mode, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "lr": cfg.lr, "beta1": cfg.beta1, "beta2": cfg.beta2,
        "weight_decay": cfg.weight_decay, "p_mean": cfg.p_mean, "p_std": cfg.p_std,
        "sigma_data": cfg.sigma_data, "seed": cfg.seed,
    }
    meta.update(extra)
    return ModelCheckpoint(descriptor, params, ema.numpy().copy().astype(np.float32),
                           exp_avg, exp_avg_sq, step, cfg.ema_rate, meta)


def _batch_views(ds: TrajectoryDataset, cfg: TrainConfig, rng: np.random.Generator):
    """Yield (clean, cond) index batches for one epoch, shuffled."""
    lo = 2 if cfg.mode == "cond" else 0
    idx = np.arange(lo, len(ds))
    if idx.size < cfg.batch_size:
        raise DiffusionConfigError(
            f"dataset too short: {idx.size} usable frames for batch {cfg.batch_size}"
        )
    rng.shuffle(idx)
    usable = idx.size - idx.size % cfg.batch_size
    for start in range(0, usable, cfg.batch_size):
        yield idx[start : start + cfg.batch_size]


def train(cfg: TrainConfig, ds: TrajectoryDataset, progress=None) -> ModelCheckpoint:
    """Full training loop; deterministic for a fixed seed and thread count.

    The conditional mode denoises frame n given clean frames n-1 and n-2.
    Per-epoch mean losses are recorded in the checkpoint metadata.
    """
    if ds.norm_stats is None:
        raise DiffusionConfigError("dataset must be standardized before training")
    if ds.split != "train":
        raise DiffusionConfigError("training requires the train split")
    torch.manual_seed(cfg.seed)
    net = networks.ScoreUNet(in_channels=1 if cfg.mode == "uncond" else 3,
                             widths=cfg.widths, blocks_per_level=cfg.blocks_per_level,
                             emb_dim=cfg.emb_dim, geometry=ds.geometry)
    pre = Preconditioner(cfg.sigma_data)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr,
                            betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    ema = torch.from_numpy(networks.parameter_vector(net).copy())
    values = torch.from_numpy(np.array(ds.values, dtype=np.float32, copy=True))
    rng = make_rng(cfg.seed)
    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        acc = 0.0
        n_batches = 0
        for batch_idx in _batch_views(ds, cfg, rng):
            clean = values[batch_idx]
            cond = None
            if cfg.mode == "cond":
                cond = torch.cat([values[batch_idx - 1], values[batch_idx - 2]], dim=1)
            opt.zero_grad(set_to_none=True)
            try:
                loss = training_loss(net, pre, clean, rng, cfg.p_mean, cfg.p_std, cond=cond)
            except TrainingDivergedError as e:
                ckpt = _snapshot(net, opt, net.descriptor(), step, cfg, ema,
                                 {"epoch_losses": _fmt_losses(epoch_losses)})
                raise TrainingDivergedError(f"step {step}: {e}", ckpt) from None
            loss.backward()
            opt.step()
            with torch.no_grad():
                cur = torch.cat([p.detach().reshape(-1) for p in net.parameters()])
                ema.mul_(cfg.ema_rate).add_(cur, alpha=1.0 - cfg.ema_rate)
            acc += float(loss.detach())
            n_batches += 1
            step += 1
        epoch_losses.append(acc / max(n_batches, 1))
        if progress:
            progress(epoch, epoch_losses[-1])
    return _snapshot(net, opt, net.descriptor(), step, cfg, ema,
                     {"epoch_losses": _fmt_losses(epoch_losses)})


def _fmt_losses(losses) -> str:
    return ",".join(f"{v:.6g}" for v in losses)


def parse_losses(s: str) -> np.ndarray:
    if not s:
        return np.array([])
    return np.array([float(v) for v in s.split(",")])


def ema_closed_form(rate: float, p0: np.ndarray, updates: list[np.ndarray]) -> np.ndarray:
    """Reference EMA: ema_T = r^T p_0 + (1-r) sum_i r^(T-1-i) p_i."""
    t = len(updates)
    out = rate**t * np.asarray(p0, dtype=np.float64)
    for i, p in enumerate(updates):
        out = out + (1.0 - rate) * rate ** (t - 1 - i) * np.asarray(p, dtype=np.float64)
    return out
