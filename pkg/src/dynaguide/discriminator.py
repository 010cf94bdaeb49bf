"""Time-consistency classifier: training, prediction, and guidance gradients.

The classifier receives a noisy candidate frame together with clean recent
history and predicts whether the candidate is the true next frame.  Its
input-gradient, taken on the raw logit, is what steers guided sampling.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import networks
from .diffusion_core import (
    ModelCheckpoint,
    Preconditioner,
    TrainingDivergedError,
    adam_state_vectors,
    draw_sigmas,
)
from .field_core import TrajectoryDataset, make_rng

PROB_EPS = 1e-6  # reporting clamp; never applied on the gradient path
_SIGMA_FLOOR = 1e-8  # keeps the noise embedding finite when sigma = 0


class DiscriminatorError(Exception):
    pass


@dataclass(frozen=True)
class NegativeSampler:
    """Integer step offsets for non-consecutive frames, centered near +1.

    Offsets are rounded draws from N(mu_step, sigma_step^2); l = 1 (the true
    next frame) is excluded and draws leaving the dataset are rejected.
    """

    mu_step: float = 1.0
    sigma_step: float = 2.0

    def draw(self, rng: np.random.Generator, n: int, n_frames: int) -> int:
        lo, hi = -n, n_frames - 1 - n
        if hi < lo or (lo == hi == 1):
            raise DiscriminatorError(
                f"no legal negative offset for frame {n} of {n_frames}"
            )
        while True:
            l = int(round(float(rng.normal(self.mu_step, self.sigma_step))))
            if l != 1 and lo <= l <= hi:
                return l

    def draw_many(self, rng, ns: np.ndarray, n_frames: int) -> np.ndarray:
        return np.array([self.draw(rng, int(n), n_frames) for n in ns], dtype=np.int64)


@dataclass(frozen=True)
class CropWindow:
    top: int
    left: int
    side: int


def draw_crop_window(rng: np.random.Generator, height: int, width: int,
                     geometry: str = "periodic_both") -> CropWindow:
    """Square window with side uniform in [H/2, H].

    Position wraps around periodic axes only; along a wall-bounded axis the
    window stays inside the domain.
    """
    base = min(height, width)
    side = int(rng.integers(base // 2, base + 1))
    if geometry == "periodic_both":
        top = int(rng.integers(height))
    else:
        top = int(rng.integers(height - side + 1))
    left = int(rng.integers(width))
    return CropWindow(top=top, left=left, side=side)


def apply_crop(x: torch.Tensor, win: CropWindow) -> torch.Tensor:
    if win.side > x.shape[-1] or win.side > x.shape[-2]:
        raise DiscriminatorError(f"crop side {win.side} exceeds field {tuple(x.shape[-2:])}")
    rolled = torch.roll(x, shifts=(-win.top, -win.left), dims=(-2, -1))
    return rolled[..., : win.side, : win.side]


def _as_batch(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim != 4:
        raise DiscriminatorError(f"{name} must be (batch, channels, height, width), got {tuple(t.shape)}")
    return t


def logit(net, x_t, cond, sigma, sigma_data: float = 0.5) -> torch.Tensor:
    """Raw classifier output for a noisy candidate given clean conditioning.

    The candidate channel is scaled by c_in(sigma) as in denoising, the
    conditioning channels pass through unscaled, and sigma enters through the
    same log-embedding as the diffusion net.  Differentiable in x_t.
    """
    x_t = _as_batch(x_t, "candidate")
    cond = _as_batch(cond, "conditioning")
    if cond.shape[0] != x_t.shape[0]:
        raise DiscriminatorError(f"batch mismatch: candidate {x_t.shape[0]} vs conditioning {cond.shape[0]}")
    if cond.shape[-2:] != x_t.shape[-2:]:
        raise DiscriminatorError(
            f"geometry mismatch: candidate {tuple(x_t.shape[-2:])} vs conditioning {tuple(cond.shape[-2:])}"
        )
    if x_t.shape[1] + cond.shape[1] != net.in_channels:
        raise DiscriminatorError(
            f"channel mismatch: {x_t.shape[1]}+{cond.shape[1]} inputs for a {net.in_channels}-channel classifier"
        )
    sig = torch.as_tensor(sigma)
    if not sig.is_floating_point():
        sig = sig.float()
    sig = sig.reshape(-1)
    if sig.numel() == 1:
        sig = sig.expand(x_t.shape[0])
    if sig.numel() != x_t.shape[0]:
        raise DiscriminatorError(f"sigma has {sig.numel()} entries for batch {x_t.shape[0]}")
    if not torch.all(sig >= 0):
        raise DiscriminatorError("sigma must be non-negative")
    sig = sig.to(x_t.dtype).clamp_min(_SIGMA_FLOOR)
    pre = Preconditioner(sigma_data)
    inp = torch.cat([pre.c_in(sig).reshape(-1, 1, 1, 1) * x_t, cond], dim=1)
    return net(inp, pre.c_noise(sig))


def predict(net, x_t, cond, sigma, sigma_data: float = 0.5) -> torch.Tensor:
    """Probability the candidate is the true next frame, in [1e-6, 1-1e-6]."""
    with torch.no_grad():
        raw = logit(net, x_t, cond, sigma, sigma_data)
    return torch.sigmoid(raw).clamp(PROB_EPS, 1.0 - PROB_EPS)


def guidance(net, x_t, cond, sigma, sigma_data: float = 0.5) -> torch.Tensor:
    """Gradient of the logit with respect to the candidate frame.

    log(q / (1-q)) with q = sigmoid(logit) is the logit itself, so the
    gradient is taken directly on the raw network output; no probability
    clamp ever touches this path.
    """
    sig_check = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if not np.all(sig_check > 0):
        raise DiscriminatorError("guidance requires sigma > 0")
    x = torch.as_tensor(x_t).detach().clone().requires_grad_(True)
    cond_d = torch.as_tensor(cond).detach()
    out = logit(net, x, cond_d, sigma, sigma_data)
    (grad,) = torch.autograd.grad(out.sum(), x)
    if not torch.isfinite(grad).all():
        norm = float(torch.linalg.vector_norm(x.detach()))
        raise DiscriminatorError(
            f"non-finite guidance gradient: sigma={sig_check.tolist()}, candidate norm={norm:.6g}"
        )
    return grad.detach()


@dataclass(frozen=True)
class DiscTrainConfig:
    steps: int = 12000
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    ema_rate: float = 0.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    m: int = 1                       # conditioning history length
    mu_step: float = 1.0
    sigma_step: float = 2.0
    crop: bool = True
    widths: tuple = (32, 64)
    blocks_per_level: int = 2
    emb_dim: int = 128
    head_width: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise DiscriminatorError("steps must be >= 1")
        if self.batch_size < 1:
            raise DiscriminatorError("batch_size must be >= 1")
        if self.lr <= 0:
            raise DiscriminatorError("lr must be positive")
        if self.m < 1:
            raise DiscriminatorError("m must be >= 1")
        if not 0.0 <= self.ema_rate < 1.0:
            raise DiscriminatorError("ema_rate must be in [0, 1)")


def _gather_cond(values: torch.Tensor, ns: np.ndarray, m: int) -> torch.Tensor:
    """Clean history as channels, most recent first: frames n, n-1, ..., n-m."""
    idx = torch.from_numpy(np.ascontiguousarray(ns))
    return torch.cat([values[idx - j] for j in range(m + 1)], dim=1)


def train_discriminator(cfg: DiscTrainConfig, ds: TrajectoryDataset,
                        progress=None, step_hook=None) -> ModelCheckpoint:
    """Cross-entropy training on (true next frame, offset frame) pairs.

    Each step draws anchor frames n uniformly, pairs the true successor n+1
    against an offset frame n+l, noises both candidates with a shared
    per-pair sigma from the diffusion training distribution, and applies one
    random square crop to every field in the step.  Deterministic for a
    fixed seed and thread count.  step_hook(step, info) exposes the crop
    window, offsets and loss for instrumentation.
    """
    if ds.norm_stats is None:
        raise DiscriminatorError("dataset must be standardized before training")
    if ds.split != "train":
        raise DiscriminatorError("training requires the train split")
    n_frames = ds.values.shape[0]
    if n_frames < cfg.m + 2:
        raise DiscriminatorError(f"dataset too short: {n_frames} frames, need >= {cfg.m + 2}")
    channels = ds.values.shape[1]
    torch.manual_seed(cfg.seed)
    net = networks.DiscriminatorNet(
        in_channels=(cfg.m + 2) * channels, widths=tuple(cfg.widths),
        blocks_per_level=cfg.blocks_per_level, emb_dim=cfg.emb_dim,
        head_width=cfg.head_width, geometry=ds.geometry,
    )
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr,
                            betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    ema = torch.from_numpy(networks.parameter_vector(net).copy())
    values = torch.from_numpy(np.array(ds.values, dtype=np.float32, copy=True))
    rng = make_rng(cfg.seed)
    sampler = NegativeSampler(cfg.mu_step, cfg.sigma_step)
    h, w = values.shape[-2:]
    b = cfg.batch_size
    targets = torch.cat([torch.ones(b), torch.zeros(b)])
    losses = []
    report_every = max(1, cfg.steps // 50)

    def checkpoint(step):
        exp_avg, exp_avg_sq = adam_state_vectors(net, opt)
        meta = {
            "steps": cfg.steps, "batch_size": cfg.batch_size, "lr": cfg.lr,
            "beta1": cfg.beta1, "beta2": cfg.beta2, "weight_decay": cfg.weight_decay,
            "p_mean": cfg.p_mean, "p_std": cfg.p_std, "sigma_data": cfg.sigma_data,
            "m": cfg.m, "mu_step": cfg.mu_step, "sigma_step": cfg.sigma_step,
            "crop": cfg.crop, "seed": cfg.seed,
            "step_losses": ",".join(f"{v:.6g}" for v in losses),
        }
        return ModelCheckpoint(net.descriptor(), networks.parameter_vector(net),
                               ema.numpy().copy().astype(np.float32),
                               exp_avg, exp_avg_sq, step, cfg.ema_rate, meta)

    for step in range(cfg.steps):
        ns = rng.integers(cfg.m, n_frames - 1, size=b)
        ls = sampler.draw_many(rng, ns, n_frames)
        sig_np = draw_sigmas(rng, b, cfg.p_mean, cfg.p_std)
        eps = rng.standard_normal((2 * b, channels, h, w))
        sig = torch.from_numpy(sig_np).float().repeat(2)
        clean = torch.cat([values[torch.from_numpy(ns + 1)],
                           values[torch.from_numpy(ns + ls)]])
        cand = clean + sig.reshape(-1, 1, 1, 1) * torch.from_numpy(eps).float()
        cond = _gather_cond(values, ns, cfg.m).repeat(2, 1, 1, 1)
        win = None
        if cfg.crop:
            win = draw_crop_window(rng, h, w, ds.geometry)
            cand = apply_crop(cand, win)
            cond = apply_crop(cond, win)
        opt.zero_grad(set_to_none=True)
        out = logit(net, cand, cond, sig, cfg.sigma_data)
        loss = F.binary_cross_entropy_with_logits(out, targets)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"step {step}: non-finite classifier loss (sigmas {np.array2string(sig_np, precision=3)})",
                checkpoint(step),
            )
        loss.backward()
        opt.step()
        with torch.no_grad():
            cur = torch.cat([p.detach().reshape(-1) for p in net.parameters()])
            ema.mul_(cfg.ema_rate).add_(cur, alpha=1.0 - cfg.ema_rate)
        loss_val = float(loss.detach())
        if step % report_every == 0 or step == cfg.steps - 1:
            losses.append(loss_val)
            if progress:
                progress(step, loss_val)
        if step_hook:
            step_hook(step, {"window": win, "ns": ns.copy(), "ls": ls.copy(),
                             "sigmas": sig_np.copy(), "loss": loss_val})
    return checkpoint(cfg.steps)


def _candidate_indices(rng, n_frames: int, m: int, count: int,
                       negatives, sampler: NegativeSampler):
    ns = rng.integers(m, n_frames - 1, size=count)
    if negatives == "sampler":
        ls = sampler.draw_many(rng, ns, n_frames)
    elif negatives == "vicinity":
        # Training distribution with l in [-m, 0] additionally removed: those
        # candidates duplicate a conditioning channel and are separable by
        # input matching alone, which would contaminate a measurement of
        # temporal discrimination.
        ls = np.empty(count, dtype=np.int64)
        for i, n in enumerate(ns):
            while True:
                l = sampler.draw(rng, int(n), n_frames)
                if not -m <= l <= 0:
                    ls[i] = l
                    break
    elif negatives == "shuffle":
        ls = np.empty(count, dtype=np.int64)
        for i, n in enumerate(ns):
            while True:
                j = int(rng.integers(n_frames))
                if not n - m <= j <= n + 1:
                    ls[i] = j - n
                    break
    elif isinstance(negatives, (int, np.integer)) and negatives != 1:
        keep = (ns + int(negatives) >= 0) & (ns + int(negatives) <= n_frames - 1)
        ns = ns[keep]
        ls = np.full(ns.size, int(negatives), dtype=np.int64)
    else:
        raise DiscriminatorError(f"unknown negative mode {negatives!r}")
    return ns, ls


def evaluate_discriminator(net, ds: TrajectoryDataset, sigma: float = 0.1,
                           n_pairs: int = 256, m: int = 1, negatives="vicinity",
                           sigma_data: float = 0.5, seed: int = 0,
                           batch: int = 64) -> dict:
    """Held-out separation of true successors from offset frames.

    Negative modes: "vicinity" (default; training offsets minus the trivial
    l=0 duplicates), "sampler" (exact training distribution), "shuffle"
    (uniform random frames), or a fixed integer offset.  Returns AUC (rank
    statistic over pooled probabilities), mean probability on each class,
    0.5-threshold accuracy, and a two-sided binomial p-value of that
    accuracy against chance.
    """
    from scipy import stats

    n_frames = ds.values.shape[0]
    if n_frames < m + 2:
        raise DiscriminatorError(f"dataset too short: {n_frames} frames, need >= {m + 2}")
    rng = make_rng(seed)
    sampler = NegativeSampler()
    ns, ls = _candidate_indices(rng, n_frames, m, n_pairs, negatives, sampler)
    values = torch.from_numpy(np.array(ds.values, dtype=np.float32, copy=True))
    channels = values.shape[1]
    h, w = values.shape[-2:]
    q_pos, q_neg = [], []
    for start in range(0, ns.size, batch):
        sl = slice(start, min(start + batch, ns.size))
        nb, lb = ns[sl], ls[sl]
        k = nb.size
        eps = rng.standard_normal((2 * k, channels, h, w))
        noisy = torch.cat([values[torch.from_numpy(nb + 1)],
                           values[torch.from_numpy(nb + lb)]])
        noisy = noisy + sigma * torch.from_numpy(eps).float()
        cond = _gather_cond(values, nb, m).repeat(2, 1, 1, 1)
        q = predict(net, noisy, cond, sigma, sigma_data).numpy()
        q_pos.append(q[:k])
        q_neg.append(q[k:])
    q_pos = np.concatenate(q_pos)
    q_neg = np.concatenate(q_neg)
    ranks = stats.rankdata(np.concatenate([q_pos, q_neg]))
    n_p, n_n = q_pos.size, q_neg.size
    auc = (ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0) / (n_p * n_n)
    correct = int((q_pos > 0.5).sum() + (q_neg < 0.5).sum())
    total = n_p + n_n
    pvalue = stats.binomtest(correct, total, 0.5).pvalue
    return {
        "auc": float(auc),
        "mean_q_pos": float(q_pos.mean()),
        "mean_q_neg": float(q_neg.mean()),
        "accuracy": correct / total,
        "n_pairs": int(n_p),
        "chance_pvalue": float(pvalue),
    }
