"""Trainable, undecimated, rationally-dilated wavelet front end.

Per level l, a learnable scale s_l in [1, s_max] is produced from a free
logit through a tempered logistic map, the shared low/high prototype
filters are stretched by s_l via linear resampling and l1-normalized, and
the running approximation is filtered depthwise with "same" padding so
every band keeps the input length. Detail bands pass through a trainable
soft threshold, learned per-level gains, and (at train time) level
dropout before the additive synthesis. A parallel-branch ensemble with
softmax fusion, scale-logit jitter and branch dropout wraps the single
transform, and an optional hybrid stage mixes the raw input back in with
learned convex weights.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import ndarr as nd
from .errors import ConfigError, ContractError, DimensionError
from .ndarr import Tensor

# Standard Daubechies-4 decomposition filters (8 taps).
DB4_DEC_LOW = np.array(
    [
        -0.010597401784997278,
        0.032883011666982945,
        0.030841381835986965,
        -0.18703481171888114,
        -0.02798376941698385,
        0.6308807679295904,
        0.7148465705525415,
        0.23037781330885523,
    ]
)
DB4_DEC_HIGH = np.array(
    [
        -0.23037781330885523,
        0.7148465705525415,
        -0.6308807679295904,
        -0.02798376941698385,
        0.18703481171888114,
        0.030841381835986965,
        -0.032883011666982945,
        -0.010597401784997278,
    ]
)

RATIONAL_ANCHOR_SCALES = (1.5, 5.0 / 3.0, 7.0 / 4.0, 9.0 / 5.0)


@dataclass
class RdwtConfig:
    """Hyperparameters of one wavelet branch.

    `filter_len` is the resampled tap count; None means ceil(proto_len *
    s_max), the smallest grid holding the largest stretch without
    truncating support. `eps_norm` only guards the l1 normalization
    against an all-zero filter; it is kept tiny so normalized filters sum
    to 1 up to ~1e-15 and near-identity configurations reconstruct exactly.
    """

    levels: int = 4
    kappa: float = 4.0
    s_max: float = 4.0
    proto_len: int = 8
    filter_len: int | None = None
    eps_norm: float = 1e-15
    p_level: float = 0.1
    level_granularity: str = "per_batch"

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.kappa <= 0:
            raise ConfigError(f"kappa must be > 0, got {self.kappa}")
        if self.s_max <= 1:
            raise ConfigError(f"s_max must be > 1, got {self.s_max}")
        if self.proto_len < 2:
            raise ConfigError(f"proto_len must be >= 2, got {self.proto_len}")
        if self.filter_len is None:
            self.filter_len = int(math.ceil(self.proto_len * self.s_max))
        if not 0.0 <= self.p_level < 1.0:
            raise ConfigError(f"p_level must be in [0, 1), got {self.p_level}")
        if self.level_granularity not in ("per_batch", "per_sample"):
            raise ConfigError(
                f"level_granularity must be per_batch or per_sample, "
                f"got {self.level_granularity!r}"
            )


def scales(z, kappa, s_max):
    """Tempered logistic map: s = 1 + (s_max - 1) * sigmoid(z / kappa)."""
    if kappa <= 0:
        raise ConfigError(f"kappa must be > 0, got {kappa}")
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=float))
    return 1.0 + (s_max - 1.0) * nd.sigmoid(z * (1.0 / kappa))


def scale_to_logit(s, kappa, s_max):
    """Invert the logistic map; used to seed logits at rational anchors."""
    s = np.asarray(s, dtype=float)
    frac = (s - 1.0) / (s_max - 1.0)
    if np.any(frac <= 0) or np.any(frac >= 1):
        raise ConfigError(f"target scales must lie strictly inside (1, {s_max})")
    return kappa * np.log(frac / (1.0 - frac))


def default_anchor_scales(levels, s_max):
    """The rational-dilation seed scales (1.5, 5/3, 7/4, 9/5) for four
    levels; an evenly spaced ladder below s_max otherwise."""
    if levels == 4 and s_max > RATIONAL_ANCHOR_SCALES[-1]:
        return np.array(RATIONAL_ANCHOR_SCALES)
    lo = 1.0 + 0.25 * (s_max - 1.0)
    hi = 1.0 + 0.75 * (s_max - 1.0)
    return np.linspace(lo, hi, levels)


class RdwtParams:
    """Trainable state of one branch: scale logits z, threshold logits
    theta (tau = softplus(theta)), per-level gains alpha, and small
    deviations from the frozen prototype filters."""

    def __init__(self, cfg, z, theta, alpha, base_low, base_high, d_low, d_high, z_mu):
        self.cfg = cfg
        self.z = z
        self.theta = theta
        self.alpha = alpha
        self.base_low = base_low  # frozen prototype, constant
        self.base_high = base_high
        self.d_low = d_low  # trainable deviation
        self.d_high = d_high
        self.z_mu = z_mu  # frozen anchor logits

    @classmethod
    def create(cls, cfg, base_low=None, base_high=None, tau_init=0.05):
        if base_low is None:
            base_low = DB4_DEC_LOW
        if base_high is None:
            base_high = DB4_DEC_HIGH
        base_low = np.asarray(base_low, dtype=float)
        base_high = np.asarray(base_high, dtype=float)
        if base_low.shape != (cfg.proto_len,) or base_high.shape != (cfg.proto_len,):
            raise ConfigError(
                f"prototype filters must have proto_len={cfg.proto_len} taps"
            )
        anchors = default_anchor_scales(cfg.levels, cfg.s_max)
        z_mu = scale_to_logit(anchors, cfg.kappa, cfg.s_max)
        theta0 = math.log(math.expm1(tau_init)) if tau_init > 0 else -40.0
        return cls(
            cfg=cfg,
            z=nd.tensor(z_mu, requires_grad=True),
            theta=nd.tensor(np.full(cfg.levels, theta0), requires_grad=True),
            alpha=nd.tensor(np.ones(cfg.levels), requires_grad=True),
            base_low=Tensor(base_low),
            base_high=Tensor(base_high),
            d_low=nd.tensor(np.zeros(cfg.proto_len), requires_grad=True),
            d_high=nd.tensor(np.zeros(cfg.proto_len), requires_grad=True),
            z_mu=z_mu.copy(),
        )

    def scales(self, z_override=None):
        z = self.z if z_override is None else z_override
        return scales(z, self.cfg.kappa, self.cfg.s_max)

    def taus(self):
        return nd.softplus(self.theta)

    def proto_low(self):
        return self.base_low + self.d_low

    def proto_high(self):
        return self.base_high + self.d_high

    def named_parameters(self, prefix=""):
        return [
            (prefix + "z", self.z),
            (prefix + "theta", self.theta),
            (prefix + "alpha", self.alpha),
            (prefix + "proto_low_delta", self.d_low),
            (prefix + "proto_high_delta", self.d_high),
        ]


# ---------------------------------------------------------------------------
# filter resampling
# ---------------------------------------------------------------------------


def _resample_raw(proto, s, out_len):
    """Stretch `proto` by factor s onto `out_len` integer taps.

    Tap j reads the zero-padded linear interpolation of the prototype at
    position j/s, so taps beyond the stretched support are exactly 0.
    Differentiable in the prototype (the map is linear) and in s
    (piecewise-linear weights; the right-limit slope is used at knots).
    """
    proto = proto if isinstance(proto, Tensor) else Tensor(proto)
    s = s if isinstance(s, Tensor) else Tensor(float(s))
    if proto.data.ndim != 1 or proto.data.size < 2:
        raise DimensionError("prototype must be a 1-D filter with >= 2 taps")
    if s.data.size != 1:
        raise DimensionError("scale must be a scalar")
    k0 = proto.data.size
    s_val = float(s.data.reshape(-1)[0])
    if s_val <= 0:
        raise ConfigError(f"resampling scale must be positive, got {s_val}")

    j = np.arange(out_len)
    t = j / s_val
    i0 = np.floor(t).astype(int)
    frac = t - i0
    valid0 = (i0 >= 0) & (i0 <= k0 - 1)
    valid1 = (i0 + 1 >= 0) & (i0 + 1 <= k0 - 1)
    p = proto.data
    p0 = np.where(valid0, p[np.clip(i0, 0, k0 - 1)], 0.0)
    p1 = np.where(valid1, p[np.clip(i0 + 1, 0, k0 - 1)], 0.0)
    w0 = np.where(valid0, 1.0 - frac, 0.0)
    w1 = np.where(valid1, frac, 0.0)
    out_data = w0 * p0 + w1 * p1
    slope = p1 - p0  # d(value)/dt inside each interpolation cell
    dt_ds = -j / (s_val * s_val)

    def back(g):
        if proto.requires_grad:
            dp = np.zeros(k0)
            np.add.at(dp, np.clip(i0, 0, k0 - 1), np.where(valid0, g * w0, 0.0))
            np.add.at(dp, np.clip(i0 + 1, 0, k0 - 1), np.where(valid1, g * w1, 0.0))
            nd._accum(proto, dp)
        if s.requires_grad:
            ds = float((g * slope * dt_ds).sum())
            nd._accum(s, np.full(s.data.shape, ds))

    return nd._make(out_data, (proto, s), back)


def resample_filter(proto, s, out_len, eps_norm=1e-15):
    """Eq-style filter construction: stretch by s, then l1-normalize with
    floor eps_norm, i.e. v / (||v||_1 + eps). An all-zero resampled filter
    normalizes to zeros rather than dividing by zero."""
    v = _resample_raw(proto, s, out_len)
    norm = nd.sum_(nd.absolute(v)) + eps_norm
    return v / norm


# ---------------------------------------------------------------------------
# analysis / synthesis
# ---------------------------------------------------------------------------


@dataclass
class SubbandStack:
    """Final approximation plus L detail bands, all sample-aligned with the
    input, and the level-dropout mask that synthesis will apply."""

    approx: Tensor
    details: list
    masks: np.ndarray

    @property
    def levels(self):
        return len(self.details)


def _conv_shared(x, h):
    """Depthwise "same" convolution with one filter shared by all channels
    (channels folded into the batch axis)."""
    shape = x.data.shape
    t = shape[-1]
    flat = nd.reshape(x, (-1, 1, t))
    w = nd.reshape(h, (1, 1, h.data.size))
    y = nd.conv1d(flat, w, groups=1)
    return nd.reshape(y, shape)


def analyze(x, params, masks=None, z_override=None):
    """Iterated two-filter analysis: a(l) = a(l-1) * h_low(l),
    d(l) = a(l-1) * h_high(l), all bands the input's length."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    if x.data.ndim not in (2, 3):
        raise DimensionError("analyze expects [C, T] or [N, C, T]")
    cfg = params.cfg
    t = x.data.shape[-1]
    if t < cfg.filter_len:
        raise DimensionError(
            f"input length {t} shorter than the resampled filter length "
            f"{cfg.filter_len}"
        )
    if masks is None:
        masks = np.ones(cfg.levels)
    s = params.scales(z_override=z_override)
    low = params.proto_low()
    high = params.proto_high()
    approx = x
    details = []
    for level in range(cfg.levels):
        s_l = nd.reshape(nd.narrow(s, 0, level, 1), ())
        h_low = resample_filter(low, s_l, cfg.filter_len, cfg.eps_norm)
        h_high = resample_filter(high, s_l, cfg.filter_len, cfg.eps_norm)
        details.append(_conv_shared(approx, h_high))
        approx = _conv_shared(approx, h_low)
    return SubbandStack(approx=approx, details=details, masks=masks)


def shrink(d, tau):
    """Soft threshold sign(d) * max(|d| - tau, 0); the subgradient is 0
    inside the dead zone and at |d| == tau exactly."""
    d = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=float))
    return nd.sign(d) * nd.relu(nd.absolute(d) - tau)


def level_masks(levels, p_level, granularity, training, rng=None, n_samples=None):
    """Bernoulli(1 - p_level) keep masks per level; eval mode keeps all.

    Survivors are not rescaled: synthesis applies the mask values directly.
    Returns shape [levels] for per_batch granularity, [n_samples, levels]
    for per_sample.
    """
    if not 0.0 <= p_level < 1.0:
        raise ConfigError(f"p_level must be in [0, 1), got {p_level}")
    if granularity not in ("per_batch", "per_sample"):
        raise ConfigError(f"unknown granularity {granularity!r}")
    if not training or p_level == 0.0:
        return np.ones(levels)
    if rng is None:
        raise ContractError("train-mode level_masks needs an rng")
    if granularity == "per_batch":
        return (rng.random(levels) >= p_level).astype(float)
    if n_samples is None:
        raise ContractError("per_sample masks need the batch size")
    return (rng.random((n_samples, levels)) >= p_level).astype(float)


def synthesize(stack, alpha, taus):
    """y = a(L) + sum_l m(l) * alpha_l * shrink(d(l), tau_l)."""
    levels = stack.levels
    masks = np.asarray(stack.masks, dtype=float)
    if masks.shape[-1] != levels:
        raise DimensionError(
            f"mask length {masks.shape[-1]} does not match {levels} levels"
        )
    y = stack.approx
    for level in range(levels):
        tau_l = nd.reshape(nd.narrow(taus, 0, level, 1), ())
        alpha_l = nd.reshape(nd.narrow(alpha, 0, level, 1), ())
        term = shrink(stack.details[level], tau_l) * alpha_l
        if masks.ndim == 1:
            m = float(masks[level])
            if m != 1.0:
                term = term * m
        else:
            if stack.approx.data.ndim != 3:
                raise DimensionError("per-sample masks require a batched input")
            term = term * Tensor(masks[:, level].reshape(-1, 1, 1))
        y = y + term
    return y


def rdwt_forward(x, params, training=False, rng=None, z_override=None, masks=None):
    """Full analyze -> threshold -> mask -> synthesize pass of one branch."""
    if masks is None:
        n = x.data.shape[0] if getattr(x, "data", np.asarray(x)).ndim == 3 else None
        masks = level_masks(
            params.cfg.levels,
            params.cfg.p_level,
            params.cfg.level_granularity,
            training,
            rng=rng,
            n_samples=n,
        )
    stack = analyze(x, params, masks=masks, z_override=z_override)
    return synthesize(stack, params.alpha, params.taus())


# ---------------------------------------------------------------------------
# regularizer
# ---------------------------------------------------------------------------


@dataclass
class RegConfig:
    """Weights of the scale regularizer plus the prototype-deviation
    penalty folded into the total loss."""

    lambda_bar: float = 1e-3
    lambda_z: float = 1e-3
    lambda_spread: float = 1e-3
    k_barrier: float = 10.0
    gamma: float = 2.0
    z_mu: np.ndarray | None = None
    proto_penalty: float = 1e-3

    def __post_init__(self):
        if self.k_barrier <= 0 or self.gamma <= 0:
            raise ConfigError("k_barrier and gamma must be positive")
        if min(self.lambda_bar, self.lambda_z, self.lambda_spread) < 0:
            raise ConfigError("regularizer weights must be non-negative")


def regularize(z, z_mu, s, cfg, s_max=4.0):
    """Barrier + anchor + spread regularizer on the learned scales.

    The spread sum runs over ordered pairs l != j (both (l, j) and (j, l)),
    implemented as the full pairwise sum minus the L unit diagonal terms.
    """
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=float))
    levels = z.data.size
    z_mu = np.asarray(z_mu, dtype=float)
    k = cfg.k_barrier
    barrier = nd.sum_(nd.exp((1.0 - s) * k) + nd.exp((s - s_max) * k))
    dz = z - Tensor(z_mu)
    anchor = nd.sum_(dz * dz)
    si = nd.reshape(s, (levels, 1))
    sj = nd.reshape(s, (1, levels))
    gaps = nd.absolute(si - sj)
    spread = nd.sum_(nd.exp(gaps * (-cfg.gamma))) - float(levels)
    return cfg.lambda_bar * barrier + cfg.lambda_z * anchor + cfg.lambda_spread * spread


# ---------------------------------------------------------------------------
# hybrid fusion and the branch ensemble
# ---------------------------------------------------------------------------


class FusionParams:
    """Two logits whose softmax gives the convex raw/wavelet mix."""

    def __init__(self, eta=None):
        self.eta = (
            eta if eta is not None else nd.tensor(np.zeros(2), requires_grad=True)
        )

    def betas(self):
        return nd.softmax(self.eta)

    def named_parameters(self, prefix=""):
        return [(prefix + "eta", self.eta)]


def hybrid_fuse(x, y, fusion):
    """beta_raw * x + beta_rdwt * y with (beta_raw, beta_rdwt) = softmax(eta)."""
    if x.data.shape != y.data.shape:
        raise DimensionError(
            f"hybrid_fuse needs matching shapes, got {x.data.shape} vs {y.data.shape}"
        )
    betas = fusion.betas()
    b_raw = nd.reshape(nd.narrow(betas, 0, 0, 1), ())
    b_rdwt = nd.reshape(nd.narrow(betas, 0, 1, 1), ())
    return x * b_raw + y * b_rdwt


class EnsembleParams:
    """Parallel wavelet branches fused by learned softmax weights."""

    def __init__(self, branches, branch_logits=None, p_branch=0.1, jitter_sigma=0.05):
        if not branches:
            raise ConfigError("ensemble needs at least one branch")
        if not 0.0 <= p_branch < 1.0:
            raise ConfigError(f"p_branch must be in [0, 1), got {p_branch}")
        self.branches = list(branches)
        self.branch_logits = (
            branch_logits
            if branch_logits is not None
            else nd.tensor(np.zeros(len(branches)), requires_grad=True)
        )
        self.p_branch = p_branch
        self.jitter_sigma = jitter_sigma

    @classmethod
    def create(cls, cfg, n_branches=1, p_branch=0.1, jitter_sigma=0.05, **kwargs):
        branches = [RdwtParams.create(cfg, **kwargs) for _ in range(n_branches)]
        return cls(branches, p_branch=p_branch, jitter_sigma=jitter_sigma)

    def named_parameters(self, prefix=""):
        out = []
        for i, b in enumerate(self.branches):
            out.extend(b.named_parameters(prefix=f"{prefix}branch{i}."))
        out.append((prefix + "branch_logits", self.branch_logits))
        return out


def ensemble_forward(x, ens, training=False, rng=None):
    """Run every branch and fuse with softmax weights.

    Train mode jitters each branch's scale logits with N(0, jitter_sigma^2)
    on the forward path only, drops branches with probability p_branch and
    renormalizes the fusion weights over the survivors (one uniformly
    chosen branch is kept if all drop). Eval mode runs all branches with
    no jitter.
    """
    n_branches = len(ens.branches)
    if n_branches < 1:
        raise ConfigError("ensemble needs at least one branch")
    if training and rng is None:
        raise ContractError("train-mode ensemble_forward needs an rng")
    outs = []
    for params in ens.branches:
        z_override = None
        if training and ens.jitter_sigma > 0:
            noise = rng.normal(0.0, ens.jitter_sigma, size=params.cfg.levels)
            z_override = params.z + Tensor(noise)
        outs.append(
            rdwt_forward(x, params, training=training, rng=rng, z_override=z_override)
        )
    weights = nd.softmax(ens.branch_logits)
    if training and ens.p_branch > 0.0:
        keep = rng.random(n_branches) >= ens.p_branch
        if not keep.any():
            keep[int(rng.integers(n_branches))] = True
        masked = weights * Tensor(keep.astype(float))
        weights = masked / nd.sum_(masked)
    out = None
    for i, branch_out in enumerate(outs):
        w_i = nd.reshape(nd.narrow(weights, 0, i, 1), ())
        term = branch_out * w_i
        out = term if out is None else out + term
    return out


def identity_prototypes(proto_len=8):
    """Delta low-pass / zero high-pass prototypes for the exact-identity
    configuration: the delta sits on the "same"-padding identity tap
    (K-1)//2, which reproduces the input when the filter is not stretched
    (scale exactly 1, filter_len == proto_len)."""
    low = np.zeros(proto_len)
    low[(proto_len - 1) // 2] = 1.0
    high = np.zeros(proto_len)
    return low, high


def identity_params(levels=4, proto_len=8):
    """A branch whose analyze+synthesize is the identity map: delta/zero
    prototypes, no stretch (filter_len == proto_len, scale logits driven
    far negative so every scale saturates to exactly 1.0)."""
    cfg = RdwtConfig(levels=levels, proto_len=proto_len, filter_len=proto_len)
    low, high = identity_prototypes(proto_len)
    params = RdwtParams.create(cfg, base_low=low, base_high=high)
    params.z.data[:] = -1e4
    return params
