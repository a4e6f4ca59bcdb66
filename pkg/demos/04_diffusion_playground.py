"""Schedules, deterministic sampling, inversion, guidance, and a tiny
trainable denoiser.

The denoisers here are deliberately small: a closed-form oracle for a
Gaussian target (so every behavior has an exact reference) and a
two-layer MLP whose first hidden layer receives an additive "control"
injection. Everything runs on desk-scale grids in seconds.
"""

import numpy as np

from countervox.diffusion import (
    Conditioning,
    GaussianOracleDenoiser,
    NULL_CONDITIONING,
    TrainConfig,
    cfg_combine,
    ddim_invert,
    ddim_sample,
    make_schedule,
    q_sample,
    train_mlp_denoiser,
)

sched = make_schedule("linear", 1000)
print(f"linear schedule: T={sched.T}, alpha_bar(T)={float(sched.alpha_bars[-1]):.2e}")

# forward noising is a two-coefficient affine map
rng = np.random.default_rng(0)
x0 = rng.uniform(0, 1, (4, 4, 4))
eps = rng.standard_normal((4, 4, 4))
x_mid = q_sample(x0, 500, eps, sched)
print(f"x at t=500: mean {x_mid.mean():+.3f} (clean mean {x0.mean():+.3f})")

# oracle-driven sampling reproduces its Gaussian target
target_mean, target_var = 0.4, 0.25
oracle = GaussianOracleDenoiser(sched, target_mean, target_var)
draws = rng.standard_normal((2000, 2, 2, 2))
samples = ddim_sample(oracle, None, sched, 50, draws)[-1]
print(f"\n2000 deterministic draws: mean {samples.mean():.3f} (target {target_mean}), "
      f"var {samples.var():.3f} (target {target_var})")

# inversion walks the same recurrence upward; regeneration undoes it
subject = target_mean + np.sqrt(target_var) * rng.standard_normal((4, 4, 4))
latents = ddim_invert(oracle, None, sched, 50, subject)
recon = ddim_sample(oracle, None, sched, 50, latents[-1])[-1]
rms = np.sqrt(np.mean((recon - subject) ** 2))
print(f"invert -> regenerate round trip RMS: {rms:.2e}")

# classifier-free guidance blends branches; w=0 and w=1 are the endpoints
eps_u, eps_c = np.zeros(3), np.ones(3)
print(f"\nguidance sweep on a toy pair: "
      f"{[float(cfg_combine(eps_u, eps_c, w)[0]) for w in (0.0, 0.5, 1.0, 2.0)]}")

# a 1-voxel MLP learns the posterior mean of N(3, 0.25)
small = make_schedule("linear", 50, 1e-4, 0.2)
values = 3.0 + 0.5 * np.random.default_rng(1).standard_normal(400)
data = [(np.array([[[v]]]), NULL_CONDITIONING) for v in values]
mlp, losses = train_mlp_denoiser(
    data, small, TrainConfig(steps=3000, batch_size=64, lr=2e-2, p_uncond=0.0), seed=2
)
print(f"\ntrained 1-voxel denoiser: {mlp.n_params} parameters, "
      f"loss {losses[:100].mean():.3f} -> {losses[-100:].mean():.3f}")
t = 5
ab = float(small.alpha_bar(t))
for x_val in (2.0, 3.0, 4.0):
    x = np.array([[[x_val]]])
    implied = float(((x - np.sqrt(1 - ab) * mlp.predict_eps(x, t, NULL_CONDITIONING))
                     / np.sqrt(ab)).ravel()[0])
    exact = float(((np.sqrt(ab) * 0.25 * x + (1 - ab) * 3.0)
                   / (ab * 0.25 + (1 - ab))).ravel()[0])
    print(f"  x_t={x_val:.1f}: implied x0 {implied:.3f} vs posterior mean {exact:.3f}")

# control injection: an all-zero control field changes nothing, bit for bit
rng2 = np.random.default_rng(3)
ctrl_data = [(rng2.standard_normal((2, 2, 2)),
              Conditioning(control=rng2.random((4, 1, 1, 1)))) for _ in range(16)]
ctrl_mlp, _ = train_mlp_denoiser(ctrl_data, small, TrainConfig(steps=200, batch_size=8), seed=4)
x_probe = rng2.standard_normal((2, 2, 2))
same = np.array_equal(
    ctrl_mlp.predict_eps(x_probe, 9, Conditioning(control=np.zeros((4, 1, 1, 1)))),
    ctrl_mlp.predict_eps(x_probe, 9, Conditioning()),
)
driven = ctrl_mlp.predict_eps(x_probe, 9, Conditioning(control=np.ones((4, 1, 1, 1))))
print(f"\nzero control == no control: {same}; "
      f"nonzero control shifts eps by {np.abs(driven - ctrl_mlp.predict_eps(x_probe, 9, Conditioning())).max():.3f}")
