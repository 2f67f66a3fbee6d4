"""Deep-Ritz network for the GL energy over a range of kappa.

A residual stack of gated blocks maps ``(x1, x2, kappa_scaled)`` to
``(Re u, Im u[, A1, A2])``. The spatial Jacobian needed by the energy is
carried forward alongside the values (two tangent directions per layer);
parameter gradients come from torch's reverse mode through that augmented
forward pass. Everything runs in float64.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch

from .gl import ProblemSpec

log = logging.getLogger(__name__)

DTYPE = torch.float64
GAMMA_MIN = 1e-6
BLOCK_KINDS = ("swiglu", "daglu")
ACTIVATIONS = ("silu", "gelu")


# ---------------------------------------------------------------- activations


def silu(x):
    return x * torch.sigmoid(x)


def silu_prime(x):
    s = torch.sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def gelu(x):
    """Exact GELU, x * Phi(x) with Phi from the error function."""
    return x * 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def gelu_prime(x):
    phi = torch.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0))) + x * phi


_ACT = {"silu": (silu, silu_prime), "gelu": (gelu, gelu_prime)}


# Stacked arrays below have shape (3, N, W): slot 0 holds values, slots 1-2
# the derivatives along x1 and x2.


def _lin(S, W):
    return S @ W.T


def _act(S, name):
    f, df = _ACT[name]
    a = S[0]
    return torch.cat([f(a)[None], df(a)[None] * S[1:]], dim=0)


def _mul(P, Q):
    p, q = P[0], Q[0]
    return torch.cat([(p * q)[None], P[1:] * q + p * Q[1:]], dim=0)


def swiglu_branch(S, W1, W2, V, activation="silu"):
    """W1 (act(W2 x) * V x); the gate activation defaults to SiLU."""
    return _lin(_mul(_act(_lin(S, W2), activation), _lin(S, V)), W1)


def daglu_branch(S, W1, W2, V, activation="silu"):
    """act(W2 h) * V h with h = act(W1 x)."""
    h = _act(_lin(S, W1), activation)
    return _mul(_act(_lin(h, W2), activation), _lin(h, V))


def dagl_u_block(x, W1, W2, V, activation, gamma):
    """Residual DAGLU block x + gamma * (act(W2 h) * V h), h = act(W1 x), values only."""
    f = _ACT[activation][0]
    h = f(x @ W1.T)
    return x + gamma * (f(h @ W2.T) * (h @ V.T))


def swiglu_block(x, W1, W2, V, activation, gamma):
    """Residual SwiGLU block x + gamma * W1 (act(W2 x) * V x), values only."""
    f = _ACT[activation][0]
    return x + gamma * ((f(x @ W2.T) * (x @ V.T)) @ W1.T)


# -------------------------------------------------------------------- network


@dataclass(frozen=True)
class NetConfig:
    width: int = 32
    depth: int = 4
    block_kind: str = "swiglu"
    activation: str = "silu"
    model: str = "reduced"
    kappa_min: float = 5.0
    kappa_max: float = 15.0

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be positive")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.model not in ("full", "reduced"):
            raise ValueError("model must be 'full' or 'reduced'")
        if not 0 < self.kappa_min < self.kappa_max:
            raise ValueError("need 0 < kappa_min < kappa_max")

    @property
    def out_dim(self) -> int:
        return 4 if self.model == "full" else 2


def parameter_names(cfg: NetConfig) -> List[str]:
    """Declared parameter ordering, also used by the checkpoint format."""
    names = ["input_map.weight", "input_map.bias"]
    for i in range(cfg.depth):
        names += [f"blocks.{i}.W1", f"blocks.{i}.W2", f"blocks.{i}.V", f"blocks.{i}.gamma"]
    return names + ["output_map.weight", "output_map.bias"]


def parameter_shapes(cfg: NetConfig):
    W = cfg.width
    shapes = {"input_map.weight": (W, 3), "input_map.bias": (W,)}
    for i in range(cfg.depth):
        for m in ("W1", "W2", "V"):
            shapes[f"blocks.{i}.{m}"] = (W, W)
        shapes[f"blocks.{i}.gamma"] = (W,)
    shapes["output_map.weight"] = (cfg.out_dim, W)
    shapes["output_map.bias"] = (cfg.out_dim,)
    return shapes


def is_gamma(name: str) -> bool:
    return name.endswith(".gamma")


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


class GlennNet:
    """Residual gated network with tensors held in declared order."""

    def __init__(self, config: NetConfig, params: Optional["OrderedDict[str, torch.Tensor]"] = None, seed=0):
        self.config = config
        if params is None:
            params = init_parameters(config, seed)
        shapes = parameter_shapes(config)
        if list(params) != parameter_names(config):
            raise ValueError("parameter names do not match the architecture")
        for name, t in params.items():
            if tuple(t.shape) != shapes[name]:
                raise ValueError(f"{name}: shape {tuple(t.shape)} != {shapes[name]}")
        self.params = OrderedDict((k, v.detach().to(DTYPE).clone().requires_grad_(True)) for k, v in params.items())

    def parameters(self) -> List[torch.Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def copy(self) -> "GlennNet":
        return GlennNet(self.config, self.params)

    def scale_kappa(self, kappa):
        c = self.config
        return 2.0 * (kappa - c.kappa_min) / (c.kappa_max - c.kappa_min) - 1.0

    def forward(self, x, kappa):
        """Values (N, out_dim) and spatial Jacobian (N, out_dim, 2) as tensors."""
        c, p = self.config, self.params
        x = torch.as_tensor(x, dtype=DTYPE)
        kappa = torch.as_tensor(kappa, dtype=DTYPE).expand(x.shape[0])
        inp = torch.cat([x, self.scale_kappa(kappa)[:, None]], dim=1)
        Win, bin_ = p["input_map.weight"], p["input_map.bias"]
        z = inp @ Win.T + bin_
        dz = Win[:, :2].T[:, None, :].expand(2, x.shape[0], c.width)
        S = torch.cat([z[None], dz], dim=0)
        branch = swiglu_branch if c.block_kind == "swiglu" else daglu_branch
        for i in range(c.depth):
            W1, W2, V, g = (p[f"blocks.{i}.{m}"] for m in ("W1", "W2", "V", "gamma"))
            S = S + g * branch(S, W1, W2, V, c.activation)
        Wout, bout = p["output_map.weight"], p["output_map.bias"]
        value = S[0] @ Wout.T + bout
        jac = (S[1:] @ Wout.T).permute(1, 2, 0)
        return value, jac

    def values(self, x, kappa):
        """Values only, without tangent propagation (for inference)."""
        c, p = self.config, self.params
        x = torch.as_tensor(x, dtype=DTYPE)
        kappa = torch.as_tensor(kappa, dtype=DTYPE).expand(x.shape[0])
        z = torch.cat([x, self.scale_kappa(kappa)[:, None]], dim=1) @ p["input_map.weight"].T + p["input_map.bias"]
        block = swiglu_block if c.block_kind == "swiglu" else dagl_u_block
        for i in range(c.depth):
            z = block(z, *(p[f"blocks.{i}.{m}"] for m in ("W1", "W2", "V")), c.activation, p[f"blocks.{i}.gamma"])
        return z @ p["output_map.weight"].T + p["output_map.bias"]


def init_parameters(cfg: NetConfig, seed=0) -> "OrderedDict[str, torch.Tensor]":
    """He-style uniform weights, zero biases, gamma = 1 / (2 depth)."""
    rng = np.random.default_rng(seed)
    out = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if is_gamma(name):
            arr = np.full(shape, 1.0 / (2 * cfg.depth))
        elif is_bias(name):
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / shape[1])
            arr = rng.uniform(-bound, bound, size=shape)
        out[name] = torch.tensor(arr, dtype=DTYPE)
    return out


def forward(net: GlennNet, x, kappa):
    """Numpy front end: ``(value, spatial_jacobian)`` at points ``x``."""
    with torch.no_grad():
        v, j = net.forward(np.atleast_2d(x), kappa)
    return v.numpy(), j.numpy()


# ----------------------------------------------------------------------- loss


@dataclass
class SampleBatch:
    points: np.ndarray
    kappas: np.ndarray

    def __len__(self):
        return len(self.kappas)


def domain_area(domain: str) -> float:
    return 0.75 if domain == "l_shape" else 1.0


def sample_points(rng, n, domain="unit_square"):
    """Uniform points in the open domain; the L-shape is rejection-sampled."""
    if domain == "unit_square":
        return rng.random((n, 2))
    if domain != "l_shape":
        raise ValueError(f"unknown domain {domain!r}")
    chunks, have = [], 0
    while have < n:
        p = rng.random((int(1.4 * (n - have)) + 16, 2))
        p = p[~((p[:, 0] >= 0.5) & (p[:, 1] >= 0.5))]
        chunks.append(p)
        have += len(p)
    return np.concatenate(chunks)[:n]


def sample_batch(rng, n, kappa_min, kappa_max, domain="unit_square") -> SampleBatch:
    pts = sample_points(rng, n, domain)
    return SampleBatch(points=pts, kappas=rng.uniform(kappa_min, kappa_max, size=n))


def energy_density(net: GlennNet, points, kappas, spec: ProblemSpec):
    """Pointwise integrand e(x, kappa) of the network energy, as a tensor."""
    if net.config.model != spec.model:
        raise ValueError(f"network is for the {net.config.model} model, problem is {spec.model}")
    pts = np.asarray(points, dtype=float)
    kap = torch.as_tensor(np.asarray(kappas, dtype=float), dtype=DTYPE)
    y, J = net.forward(pts, kap)
    a, b = y[:, 0], y[:, 1]
    ga, gb = J[:, 0, :], J[:, 1, :]
    if spec.reduced:
        A = torch.as_tensor(spec.fixed_A(pts), dtype=DTYPE)
    else:
        A = y[:, 2:4]
    k = kap[:, None]
    # i/kappa grad u + A u, split into real and imaginary parts
    re = -gb / k + A * a[:, None]
    im = ga / k + A * b[:, None]
    e = (re**2 + im**2).sum(dim=1) + 0.5 * (1.0 - a**2 - b**2) ** 2
    if not spec.reduced:
        dA = J[:, 2:4, :]
        curl = dA[:, 1, 0] - dA[:, 0, 1]
        div = dA[:, 0, 0] + dA[:, 1, 1]
        h = torch.as_tensor(spec.h_ext(pts), dtype=DTYPE)
        e = e + (curl - h) ** 2 + div**2
    return 0.5 * e


def loss(net: GlennNet, batch: SampleBatch, spec: ProblemSpec):
    kap = torch.as_tensor(batch.kappas, dtype=DTYPE)
    return (kap * energy_density(net, batch.points, batch.kappas, spec)).mean()


def loss_and_grad(net: GlennNet, batch: SampleBatch, spec: ProblemSpec):
    """Batch mean of kappa * e and its gradient, one tensor per parameter."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    params = net.parameters()
    val = loss(net, batch, spec)
    grads = torch.autograd.grad(val, params)
    return float(val.detach()), [g.detach() for g in grads]


def mc_energy(net: GlennNet, kappa, spec: ProblemSpec, n_samples=200_000, seed=0) -> float:
    """Monte-Carlo estimate of the network energy at a single kappa."""
    rng = np.random.default_rng(seed)
    pts = sample_points(rng, n_samples, spec.domain)
    with torch.no_grad():
        e = energy_density(net, pts, np.full(n_samples, float(kappa)), spec)
    return domain_area(spec.domain) * float(e.mean())


# ----------------------------------------------------------------- optimizer


@dataclass
class TrainConfig:
    kappa_min: float = 5.0
    kappa_max: float = 15.0
    batch_size: int = 256
    steps_per_epoch: int = 100
    epochs: int = 5
    lr_main: float = 3e-3
    lr_scaling: float = 3e-4
    warmup_steps: int = 50
    decay: str = "cosine"  # "cosine" or "exponential"
    min_lr: float = 1e-5
    final_linear_steps: int = 0
    decay_rate: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.kappa_min < self.kappa_max:
            raise ValueError("need 0 < kappa_min < kappa_max")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 1:
            raise ValueError("batch_size, steps_per_epoch and epochs must be >= 1")
        if not (self.lr_main > 0 and self.lr_scaling > 0):
            raise ValueError("learning rates must be positive")
        if self.decay not in ("cosine", "exponential"):
            raise ValueError("decay must be 'cosine' or 'exponential'")
        if self.warmup_steps < 0 or self.final_linear_steps < 0:
            raise ValueError("step counts must be non-negative")
        if not 0 <= self.min_lr <= self.lr_main:
            raise ValueError("min_lr must lie in [0, lr_main]")

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    def to_dict(self):
        return asdict(self)


def _decay_factor(step, cfg: TrainConfig, floor):
    """Multiplier of the target rate after warm-up; ``floor`` is min_lr / target."""
    t = step - cfg.warmup_steps
    if cfg.decay == "exponential":
        return cfg.decay_rate ** (t // cfg.steps_per_epoch)
    span = max(cfg.total_steps - cfg.warmup_steps - cfg.final_linear_steps, 1)
    if t <= span:
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t / span))
    tail = cfg.final_linear_steps
    return floor * max(0.0, 1.0 - (t - span) / tail) if tail else floor


def lr_schedule(step: int, cfg: TrainConfig):
    """(lr_main, lr_scaling) at optimizer step ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        f = step / cfg.warmup_steps
        return cfg.lr_main * f, cfg.lr_scaling * f
    # the scaling rate decays by the same factor, so min_lr is relative to lr_main
    f = _decay_factor(step, cfg, cfg.min_lr / cfg.lr_main)
    return cfg.lr_main * f, cfg.lr_scaling * f


def make_optimizer(net: GlennNet, weight_decay=0.0, eps=1e-8) -> torch.optim.AdamW:
    """AdamW with groups (weights, biases, gammas); decay only on weight matrices."""
    groups = {"main": [], "bias": [], "scaling": []}
    for name, p in net.params.items():
        key = "scaling" if is_gamma(name) else "bias" if is_bias(name) else "main"
        groups[key].append(p)
    return torch.optim.AdamW(
        [
            {"params": groups["main"], "weight_decay": weight_decay, "name": "main"},
            {"params": groups["bias"], "weight_decay": 0.0, "name": "bias"},
            {"params": groups["scaling"], "weight_decay": 0.0, "name": "scaling"},
        ],
        lr=1e-3,
        eps=eps,
    )


def adamw_step(net: GlennNet, grads, optimizer: torch.optim.AdamW, lr_main, lr_scaling, weight_decay=None):
    """One decoupled-weight-decay Adam update, then clamp gamma into (1e-6, 1]."""
    for group in optimizer.param_groups:
        group["lr"] = lr_scaling if group["name"] == "scaling" else lr_main
        if weight_decay is not None and group["name"] == "main":
            group["weight_decay"] = weight_decay
    for p, g in zip(net.parameters(), grads):
        p.grad = g.clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    with torch.no_grad():
        for name, p in net.params.items():
            if is_gamma(name):
                p.clamp_(GAMMA_MIN, 1.0)


# ------------------------------------------------------------------- training


class TrainingDiverged(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainResult:
    net: GlennNet
    losses: List[float] = field(default_factory=list)


def train(net: GlennNet, cfg: TrainConfig, spec: ProblemSpec, seed: Optional[int] = None,
          callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run ``steps_per_epoch * epochs`` AdamW steps on fresh per-epoch samples.

    The input net is not modified; the trained copy is returned.
    """
    seed = cfg.seed if seed is None else seed
    net = net.copy()
    opt = make_optimizer(net, cfg.weight_decay)
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([seed, epoch])
        bulk = sample_batch(rng, cfg.batch_size * cfg.steps_per_epoch, cfg.kappa_min, cfg.kappa_max, spec.domain)
        for s in range(cfg.steps_per_epoch):
            sl = slice(s * cfg.batch_size, (s + 1) * cfg.batch_size)
            batch = SampleBatch(bulk.points[sl], bulk.kappas[sl])
            val, grads = loss_and_grad(net, batch, spec)
            if not math.isfinite(val):
                raise TrainingDiverged(step, val)
            lr_main, lr_scale = lr_schedule(step, cfg)
            adamw_step(net, grads, opt, lr_main, lr_scale)
            losses.append(val)
            if callback is not None:
                callback(step, val)
            step += 1
        log.info("epoch %d  mean loss %.6f", epoch, float(np.mean(losses[-cfg.steps_per_epoch:])))
    return TrainResult(net=net, losses=losses)
