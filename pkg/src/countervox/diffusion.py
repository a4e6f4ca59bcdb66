"""Diffusion mathematics on small voxel fields.

States are plain float64 arrays; a denoiser predicts the noise component
of a state at a given timestep. Everything a full-scale latent-diffusion
stack would learn is represented here by two desk-scale denoisers:

* :class:`GaussianOracleDenoiser` / :class:`LatentOracleDenoiser` use the
  closed-form posterior mean of a Gaussian data distribution, giving
  exact expected behavior for tests and oracle-driven pipelines.
* :class:`MLPDenoiser` is a small trainable network with additive
  injection of a control volume into its first hidden layer, standing in
  for skip-connection feature conditioning.

Timesteps run 0..T with ``alpha_bar(0) == 1`` (no noise). Deterministic
(eta = 0) sampling and inversion share one update rule, so constant-noise
predictors invert exactly, and smooth predictors invert to small error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .grid import VoxelGrid, trilinear_upsample

__all__ = [
    "NoiseSchedule",
    "Conditioning",
    "NULL_CONDITIONING",
    "Denoiser",
    "GaussianOracleDenoiser",
    "LatentOracleDenoiser",
    "MLPDenoiser",
    "TrainConfig",
    "TrainingError",
    "make_schedule",
    "ddim_timesteps",
    "q_sample",
    "ddim_step",
    "ddim_sample",
    "ddim_invert",
    "cfg_combine",
    "oracle_eps",
    "train_mlp_denoiser",
    "mlp_loss_and_grads",
    "encode_volume",
    "condition_from_latent",
    "save_denoiser",
    "load_denoiser",
]


class TrainingError(RuntimeError):
    """Denoiser training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Schedules


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates and their cumulative products.

    ``betas[i]`` is the rate of step ``i+1``; ``alpha_bars`` has length
    ``T+1`` with ``alpha_bars[0] == 1`` and is strictly decreasing.
    """

    kind: str
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a nonempty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        betas = betas.copy()
        betas.setflags(write=False)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        if np.any(np.diff(alpha_bars) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}")
        return self.alpha_bars[t]


def make_schedule(kind: str, T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Build a linear or squared-cosine schedule of ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "linear":
        if not (0 < beta_min <= beta_max < 1):
            raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
        betas = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        s = 0.008
        t = np.arange(T + 1) / T
        f = np.cos((t + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind, betas)


def ddim_timesteps(T: int, substeps: int) -> np.ndarray:
    """Evenly strided descending timesteps ``T ... 0`` (substeps+1 entries)."""
    if not 1 <= substeps <= T:
        raise ValueError(f"substeps must lie in 1..{T}, got {substeps}")
    ts = np.unique(np.round(np.linspace(0, T, substeps + 1)).astype(np.int64))
    return ts[::-1].copy()


# ---------------------------------------------------------------------------
# Conditioning and the denoiser contract


@dataclass(frozen=True)
class Conditioning:
    """Inputs that steer a denoiser.

    ``metadata`` is a z-scored vector; ``control`` a voxel field (any
    shape) injected additively into the network; ``latent`` an upsampled
    coarse field the decoding stage is conditioned on. ``null`` marks the
    unconditional branch used by classifier-free guidance.
    """

    metadata: np.ndarray | None = None
    control: np.ndarray | None = None
    latent: np.ndarray | None = None
    null: bool = False

    def __post_init__(self):
        for name in ("metadata", "control", "latent"):
            val = getattr(self, name)
            if val is not None:
                arr = np.asarray(val, dtype=np.float64)
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"conditioning field {name} must be finite")
                object.__setattr__(self, name, arr)


NULL_CONDITIONING = Conditioning(null=True)


class Denoiser(Protocol):
    """Noise predictor: output has the shape of the input state."""

    def predict_eps(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        ...


# ---------------------------------------------------------------------------
# Forward process and DDIM updates


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise a clean state to timestep ``t``:
    ``x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = float(sched.alpha_bar(int(t)))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _jump(x_from: np.ndarray, ab_from: float, ab_to: float, eps_hat: np.ndarray) -> np.ndarray:
    x0_hat = (x_from - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to) * eps_hat


def ddim_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_hat: np.ndarray,
    sched: NoiseSchedule,
    eta: float = 0.0,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse update from timestep ``t`` down to ``t_prev``.

    ``eta = 0`` is fully deterministic; ``eta > 0`` adds the stochastic
    term with caller-supplied ``noise``.
    """
    t, t_prev = int(t), int(t_prev)
    if t_prev >= t or t_prev < 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab_t = float(sched.alpha_bar(t))
    ab_p = float(sched.alpha_bar(t_prev))
    if eta == 0.0:
        return _jump(x_t, ab_t, ab_p, eps_hat)
    if noise is None:
        raise ValueError("eta > 0 requires caller-supplied noise")
    sigma = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    dir_coef = math.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0))
    return math.sqrt(ab_p) * x0_hat + dir_coef * eps_hat + sigma * np.asarray(noise)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance blend:
    ``eps_uncond + w * (eps_cond - eps_uncond)``."""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {eps_uncond.shape} vs {eps_cond.shape}")
    if w == 0.0:  # the endpoint identities hold exactly
        return eps_uncond.copy()
    if w == 1.0:
        return eps_cond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)


def _guided_eps(denoiser: Denoiser, x, t: int, cond: Conditioning | None, w: float):
    if cond is None or cond.null or w == 0.0:
        return denoiser.predict_eps(x, t, NULL_CONDITIONING)
    if w == 1.0:
        return denoiser.predict_eps(x, t, cond)
    return cfg_combine(
        denoiser.predict_eps(x, t, NULL_CONDITIONING),
        denoiser.predict_eps(x, t, cond),
        w,
    )


def ddim_sample(
    denoiser: Denoiser,
    cond: Conditioning | None,
    sched: NoiseSchedule,
    substeps: int,
    x_T: np.ndarray,
    guidance_w: float = 1.0,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
    start_t: int | None = None,
) -> np.ndarray:
    """Run the reverse process from ``x_T`` down to a clean state.

    Returns the full trajectory stacked on a new leading axis: entry 0 is
    ``x_T``, the last entry is the sample. ``x_T`` may carry leading batch
    axes if the denoiser broadcasts over them. ``start_t`` resumes from an
    intermediate latent: it must be one of the strided timesteps and
    ``x_T`` is then the state at that timestep.
    """
    ts = ddim_timesteps(sched.T, substeps)
    if start_t is not None:
        where = np.nonzero(ts == int(start_t))[0]
        if not len(where):
            raise ValueError(f"start_t={start_t} is not one of the strided timesteps")
        ts = ts[int(where[0]):]
    x = np.asarray(x_T, dtype=np.float64)
    trajectory = [x]
    for i in range(len(ts) - 1):
        t, t_prev = int(ts[i]), int(ts[i + 1])
        eps_hat = _guided_eps(denoiser, x, t, cond, guidance_w)
        noise = rng.standard_normal(x.shape) if (eta > 0 and rng is not None) else None
        x = ddim_step(x, t, t_prev, eps_hat, sched, eta, noise)
        trajectory.append(x)
    return np.stack(trajectory)


def ddim_invert(
    denoiser: Denoiser,
    cond: Conditioning | None,
    sched: NoiseSchedule,
    substeps: int,
    x0: np.ndarray,
    guidance_w: float = 1.0,
    steps: int | None = None,
    refine: int = 3,
) -> np.ndarray:
    """Run the deterministic recurrence upward from a clean state.

    Entry ``i`` of the returned stack sits at timestep
    ``ddim_timesteps(T, substeps)[::-1][i]``; the last entry is the fully
    inverted latent. Each upward jump applies the sampling recurrence in
    reverse with the denoiser evaluated at the target timestep, then
    repeats the same jump ``refine`` times with the prediction taken at
    the provisional target state. Each repeat is a fixed-point iteration
    toward the state the downward pass would consume, shrinking the
    round-trip error by roughly an order of magnitude per iteration (a
    state-independent predictor is inverted exactly even at ``refine=0``).
    ``steps`` truncates the ascent after that many jumps (partial
    inversion).
    """
    ts = ddim_timesteps(sched.T, substeps)[::-1]  # ascending 0 ... T
    n = len(ts) - 1 if steps is None else int(steps)
    if not 0 <= n <= len(ts) - 1:
        raise ValueError(f"steps must lie in 0..{len(ts) - 1}")
    if refine < 0:
        raise ValueError("refine must be >= 0")
    x = np.asarray(x0, dtype=np.float64)
    trajectory = [x]
    for i in range(n):
        s, t = int(ts[i]), int(ts[i + 1])
        ab_s, ab_t = float(sched.alpha_bar(s)), float(sched.alpha_bar(t))
        eps_hat = _guided_eps(denoiser, x, t, cond, guidance_w)
        x_next = _jump(x, ab_s, ab_t, eps_hat)
        for _ in range(refine):
            eps_hat = _guided_eps(denoiser, x_next, t, cond, guidance_w)
            x_next = _jump(x, ab_s, ab_t, eps_hat)
        x = x_next
        trajectory.append(x)
    return np.stack(trajectory)


# ---------------------------------------------------------------------------
# Analytic oracle denoisers


def oracle_eps(x_t: np.ndarray, t: int, sched: NoiseSchedule, mean, var) -> np.ndarray:
    """Exact noise prediction when the clean data is ``N(mean, diag(var))``.

    Componentwise Gaussian posterior:
    ``E[x0 | x_t] = ((1-ab)*mean + sqrt(ab)*var*x_t) / (ab*var + 1-ab)``
    and ``eps = (x_t - sqrt(ab)*E[x0|x_t]) / sqrt(1-ab)``. At ``t = 0``
    the state is noiseless and the zero field is returned.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("oracle variance must be positive")
    ab = float(sched.alpha_bar(int(t)))
    if ab >= 1.0:
        return np.zeros_like(x_t)
    sq = math.sqrt(ab)
    post_mean = ((1.0 - ab) * np.asarray(mean, dtype=np.float64) + sq * var * x_t) / (
        ab * var + (1.0 - ab)
    )
    return (x_t - sq * post_mean) / math.sqrt(1.0 - ab)


@dataclass(frozen=True)
class GaussianOracleDenoiser:
    """Closed-form denoiser for a fixed Gaussian target; ignores conditioning."""

    schedule: NoiseSchedule
    mean: np.ndarray | float
    var: np.ndarray | float

    def predict_eps(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        return oracle_eps(x_t, t, self.schedule, self.mean, self.var)


@dataclass(frozen=True)
class LatentOracleDenoiser:
    """Closed-form denoiser targeting ``N(cond.latent, var)``.

    Models a decoding stage concentrated around the conditioning field.
    On the null branch the target mean falls back to the zero field.
    """

    schedule: NoiseSchedule
    var: float

    def predict_eps(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        if cond.null or cond.latent is None:
            mean = 0.0
        else:
            mean = cond.latent
        return oracle_eps(x_t, t, self.schedule, mean, self.var)


# ---------------------------------------------------------------------------
# Trainable MLP denoiser


@dataclass
class MLPDenoiser:
    """Two-hidden-layer network over flattened states.

    Inputs are the flattened state, sinusoidal timestep features, and the
    metadata vector. A control volume and a latent-condition volume enter
    as additive residuals on the first hidden pre-activation ("control
    injection"), so an absent or all-zero field reproduces the
    unconditioned forward pass bit-exactly.
    """

    grid_shape: tuple[int, ...]
    meta_dim: int
    control_shape: tuple[int, ...] | None
    latent_shape: tuple[int, ...] | None
    hidden: tuple[int, int]
    time_features: int
    t_scale: float
    params: dict[str, np.ndarray]
    train_meta: dict | None = None  # training config/seed, for provenance

    @classmethod
    def init(
        cls,
        grid_shape: Sequence[int],
        T: int,
        meta_dim: int = 0,
        control_shape: Sequence[int] | None = None,
        latent_shape: Sequence[int] | None = None,
        hidden: tuple[int, int] = (64, 64),
        time_features: int = 8,
        seed: int = 0,
    ) -> "MLPDenoiser":
        rng = np.random.default_rng(seed)
        d = int(np.prod(grid_shape))
        h1, h2 = hidden
        f_in = d + time_features + meta_dim
        params = {
            "W1": rng.standard_normal((h1, f_in)) / math.sqrt(f_in),
            "b1": np.zeros(h1),
            "W2": rng.standard_normal((h2, h1)) / math.sqrt(h1),
            "b2": np.zeros(h2),
            "W3": rng.standard_normal((d, h2)) / math.sqrt(h2),
            "b3": np.zeros(d),
        }
        if control_shape is not None:
            dc = int(np.prod(control_shape))
            params["Wc"] = rng.standard_normal((h1, dc)) / math.sqrt(dc)
        if latent_shape is not None:
            dl = int(np.prod(latent_shape))
            params["Wl"] = rng.standard_normal((h1, dl)) / math.sqrt(dl)
        return cls(
            grid_shape=tuple(int(g) for g in grid_shape),
            meta_dim=int(meta_dim),
            control_shape=tuple(int(c) for c in control_shape) if control_shape is not None else None,
            latent_shape=tuple(int(c) for c in latent_shape) if latent_shape is not None else None,
            hidden=(int(h1), int(h2)),
            time_features=int(time_features),
            t_scale=1.0 / float(T),
            params=params,
        )

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _time_features(self, t: np.ndarray) -> np.ndarray:
        # Geometric frequencies over the normalized timestep.
        half = self.time_features // 2
        freqs = np.pi * (2.0 ** np.arange(half))
        ang = np.outer(np.asarray(t, dtype=np.float64) * self.t_scale, freqs)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _forward(
        self,
        x: np.ndarray,           # (B, D)
        t: np.ndarray,           # (B,)
        meta: np.ndarray,        # (B, K)
        ctrl: np.ndarray | None, # (B, Dc)
        lat: np.ndarray | None,  # (B, Dl)
    ):
        feats = [x, self._time_features(t)]
        if self.meta_dim:
            feats.append(meta)
        f = np.concatenate(feats, axis=1)
        p = self.params
        a1 = f @ p["W1"].T + p["b1"]
        if ctrl is not None:
            a1 = a1 + ctrl @ p["Wc"].T
        if lat is not None:
            a1 = a1 + lat @ p["Wl"].T
        h1 = np.tanh(a1)
        h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
        out = h2 @ p["W3"].T + p["b3"]
        return out, (f, h1, h2, ctrl, lat)

    def _cond_rows(self, cond: Conditioning, batch: int):
        meta = np.zeros((batch, self.meta_dim))
        ctrl = np.zeros((batch, int(np.prod(self.control_shape)))) if self.control_shape else None
        lat = np.zeros((batch, int(np.prod(self.latent_shape)))) if self.latent_shape else None
        if not cond.null:
            if cond.metadata is not None:
                if self.meta_dim != cond.metadata.size:
                    raise ValueError(
                        f"metadata size {cond.metadata.size} != declared {self.meta_dim}"
                    )
                meta[:] = cond.metadata.ravel()
            if cond.control is not None and ctrl is not None:
                ctrl[:] = cond.control.ravel()
            if cond.latent is not None and lat is not None:
                lat[:] = cond.latent.ravel()
        return meta, ctrl, lat

    def predict_eps(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        gdim = len(self.grid_shape)
        if x_t.shape[x_t.ndim - gdim:] != self.grid_shape:
            raise ValueError(f"state shape {x_t.shape} does not end with {self.grid_shape}")
        lead = x_t.shape[: x_t.ndim - gdim]
        x2d = x_t.reshape(-1, int(np.prod(self.grid_shape)))
        meta, ctrl, lat = self._cond_rows(cond, x2d.shape[0])
        t_vec = np.full(x2d.shape[0], float(t))
        out, _ = self._forward(x2d, t_vec, meta, ctrl, lat)
        return out.reshape(lead + self.grid_shape)


def mlp_loss_and_grads(
    mlp: MLPDenoiser,
    x_t: np.ndarray,    # (B, D)
    t: np.ndarray,      # (B,)
    eps: np.ndarray,    # (B, D)
    meta: np.ndarray,   # (B, K)
    ctrl: np.ndarray | None,
    lat: np.ndarray | None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-squared noise-prediction error and analytic parameter gradients."""
    out, (f, h1, h2, ctrl, lat) = mlp._forward(x_t, t, meta, ctrl, lat)
    diff = out - eps
    loss = float(np.mean(diff * diff))
    p = mlp.params
    d_out = 2.0 * diff / diff.size
    grads = {
        "W3": d_out.T @ h2,
        "b3": d_out.sum(axis=0),
    }
    d_h2 = d_out @ p["W3"]
    d_a2 = d_h2 * (1.0 - h2 * h2)
    grads["W2"] = d_a2.T @ h1
    grads["b2"] = d_a2.sum(axis=0)
    d_h1 = d_a2 @ p["W2"]
    d_a1 = d_h1 * (1.0 - h1 * h1)
    grads["W1"] = d_a1.T @ f
    grads["b1"] = d_a1.sum(axis=0)
    if "Wc" in p:
        grads["Wc"] = d_a1.T @ ctrl if ctrl is not None else np.zeros_like(p["Wc"])
    if "Wl" in p:
        grads["Wl"] = d_a1.T @ lat if lat is not None else np.zeros_like(p["Wl"])
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch training settings for the MLP denoiser.

    Desk-scale defaults; ``p_uncond`` is the probability of dropping the
    conditioning of a sample to train the null branch for guidance.
    """

    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-2
    p_uncond: float = 0.1
    hidden: tuple[int, int] = (64, 64)
    time_features: int = 8


def train_mlp_denoiser(
    data: Sequence[tuple[np.ndarray, Conditioning]],
    sched: NoiseSchedule,
    config: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[MLPDenoiser, np.ndarray]:
    """Fit an MLP denoiser by SGD on noise-prediction MSE.

    Every sample supplies a clean state and its conditioning; conditioning
    is dropped per sample with probability ``p_uncond`` during training.
    Deterministic given the seed. Returns the denoiser and the per-step
    loss history (empty for zero steps).
    """
    config = config or TrainConfig()
    if not data:
        raise ValueError("training data must be nonempty")
    x0s = np.stack([np.asarray(x, dtype=np.float64) for x, _ in data])
    grid_shape = x0s.shape[1:]
    n = x0s.shape[0]
    d = int(np.prod(grid_shape))
    x0s = x0s.reshape(n, d)

    conds = [c for _, c in data]
    meta_dim = max((c.metadata.size for c in conds if c.metadata is not None), default=0)
    ctrl_shape = next((c.control.shape for c in conds if c.control is not None), None)
    lat_shape = next((c.latent.shape for c in conds if c.latent is not None), None)
    meta_rows = np.zeros((n, meta_dim))
    ctrl_rows = np.zeros((n, int(np.prod(ctrl_shape)))) if ctrl_shape else None
    lat_rows = np.zeros((n, int(np.prod(lat_shape)))) if lat_shape else None
    for i, c in enumerate(conds):
        if c.null:
            continue
        if c.metadata is not None:
            meta_rows[i, : c.metadata.size] = c.metadata.ravel()
        if c.control is not None and ctrl_rows is not None:
            ctrl_rows[i] = c.control.ravel()
        if c.latent is not None and lat_rows is not None:
            lat_rows[i] = c.latent.ravel()

    rng = np.random.default_rng(seed)
    mlp = MLPDenoiser.init(
        grid_shape,
        sched.T,
        meta_dim=meta_dim,
        control_shape=ctrl_shape,
        latent_shape=lat_shape,
        hidden=config.hidden,
        time_features=config.time_features,
        seed=seed,
    )
    losses = np.zeros(config.steps)
    sqrt_ab = np.sqrt(sched.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bars)
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        t = rng.integers(1, sched.T + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, d))
        x_t = sqrt_ab[t, None] * x0s[idx] + sqrt_1mab[t, None] * eps
        keep = (rng.random(config.batch_size) >= config.p_uncond).astype(np.float64)[:, None]
        meta = meta_rows[idx] * keep
        ctrl = ctrl_rows[idx] * keep if ctrl_rows is not None else None
        lat = lat_rows[idx] * keep if lat_rows is not None else None
        loss, grads = mlp_loss_and_grads(mlp, x_t, t.astype(np.float64), eps, meta, ctrl, lat)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}")
        losses[step] = loss
        for key, g in grads.items():
            mlp.params[key] -= config.lr * g
    mlp.train_meta = {
        "seed": int(seed),
        "steps": config.steps,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "p_uncond": config.p_uncond,
        "n_samples": n,
        "schedule": {"kind": sched.kind, "T": sched.T},
    }
    return mlp, losses


# ---------------------------------------------------------------------------
# Toy encoder and latent conditioning


def encode_volume(x: VoxelGrid, factor) -> VoxelGrid:
    """Block-average downsampling by an integer factor per axis."""
    if np.isscalar(factor):
        factor = (factor, factor, factor)
    fx, fy, fz = (int(f) for f in factor)
    if min(fx, fy, fz) < 1:
        raise ValueError("factor must be >= 1 per axis")
    nx, ny, nz = x.dims
    if nx % fx or ny % fy or nz % fz:
        raise ValueError(f"dims {x.dims} not divisible by factor {(fx, fy, fz)}")
    v = x.values.reshape(nx // fx, fx, ny // fy, fy, nz // fz, fz).mean(axis=(1, 3, 5))
    sx, sy, sz = x.spacing
    return VoxelGrid(v, (sx * fx, sy * fy, sz * fz))


def condition_from_latent(z: VoxelGrid, factor) -> Conditioning:
    """Package an upsampled coarse field as the latent condition."""
    return Conditioning(latent=trilinear_upsample(z, factor).values)


# ---------------------------------------------------------------------------
# MLP serialization: JSON header + little-endian float64 payload

_PARAM_ORDER = ("W1", "b1", "Wc", "Wl", "W2", "b2", "W3", "b3")


def save_denoiser(mlp: MLPDenoiser, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "grid_shape": list(mlp.grid_shape),
        "meta_dim": mlp.meta_dim,
        "control_shape": list(mlp.control_shape) if mlp.control_shape else None,
        "latent_shape": list(mlp.latent_shape) if mlp.latent_shape else None,
        "hidden": list(mlp.hidden),
        "time_features": mlp.time_features,
        "t_scale": mlp.t_scale,
        "train_meta": mlp.train_meta,
        "params": {k: list(mlp.params[k].shape) for k in _PARAM_ORDER if k in mlp.params},
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    payload = b"".join(
        mlp.params[k].astype("<f8").tobytes() for k in _PARAM_ORDER if k in mlp.params
    )
    path.with_suffix(".bin").write_bytes(payload)


def load_denoiser(path) -> MLPDenoiser:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    params = {}
    offset = 0
    for key, shape in header["params"].items():
        size = int(np.prod(shape))
        params[key] = (
            np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        )
        offset += size * 8
    return MLPDenoiser(
        grid_shape=tuple(header["grid_shape"]),
        meta_dim=header["meta_dim"],
        control_shape=tuple(header["control_shape"]) if header["control_shape"] else None,
        latent_shape=tuple(header["latent_shape"]) if header["latent_shape"] else None,
        hidden=tuple(header["hidden"]),
        time_features=header["time_features"],
        t_scale=header["t_scale"],
        params=params,
        train_meta=header.get("train_meta"),
    )
