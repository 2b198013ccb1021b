"""Flow-matching Gaussian actor and value critic.

Actions live in the normalized box [-1, 1]^3 (planar displacement scaled by
a_max plus a gripper command). The sampler starts from standard normal noise
and applies N stochastic Euler steps; each increment is an explicit Gaussian
transition, so log-probabilities and PPO ratios are exact. The per-step scale
comes from the noise schedule and, in the learned regimes, from a softplus
head conditioned on the fused embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import noise as noise_mod
from .nn import MLP

ACTION_DIM = 3
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ActionSample:
    """One batch of sampled actions with everything needed to replay them."""
    actions: np.ndarray    # (B, 3) clipped to the action box
    log_prob: np.ndarray   # (B,)
    flow_path: np.ndarray  # (N+1, B, 3) pre-clip flow states
    means: np.ndarray      # (N, B, 3)
    sigmas: np.ndarray     # (N, B, 3)


class FlowPolicy:
    """Velocity network, noise head, and stochastic Euler sampler."""

    def __init__(self, rng: np.random.Generator, embed_dim: int,
                 n_steps: int = 4, hidden: int = 64, init_sigma: float = 0.3):
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.embed_dim = embed_dim
        self.n_steps = n_steps
        self.velocity = MLP(rng, [ACTION_DIM + 1 + embed_dim, hidden, hidden, ACTION_DIM],
                            name="policy/velocity")
        # raw head output passes through softplus; bias picks the initial scale
        raw_bias = math.log(math.expm1(init_sigma))
        self.sigma_head = MLP(rng, [embed_dim + 1, hidden, ACTION_DIM],
                              name="policy/sigma", last_bias=raw_bias)

    def params(self) -> dict:
        out = self.velocity.params()
        out.update(self.sigma_head.params())
        return out

    def sigma_params(self) -> dict:
        return self.sigma_head.params()

    def _velocity_fwd(self, x: np.ndarray, t: float, h: np.ndarray) -> np.ndarray:
        tcol = np.full((x.shape[0], 1), t)
        out = self.velocity(ad.Tensor(np.concatenate([x, tcol, h], axis=-1))).data
        if not np.isfinite(out).all():
            raise FloatingPointError(
                f"velocity net produced non-finite output at t={t}")
        return out

    def _sigma_learned_fwd(self, t: float, h: np.ndarray) -> np.ndarray:
        tcol = np.full((h.shape[0], 1), t)
        raw = self.sigma_head(ad.Tensor(np.concatenate([h, tcol], axis=-1))).data
        return np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw)))

    def integrate_step(self, x, t, h, sigma, eps, delta):
        """x + delta * f(x, t, h) + sigma * eps for one Euler step."""
        if delta <= 0:
            raise ValueError("step size delta must be > 0")
        if np.any(np.asarray(sigma) <= 0):
            raise ValueError("sigma must be positive elementwise")
        return x + delta * self._velocity_fwd(x, t, h) + sigma * eps

    def step_sigma(self, t: float, h: np.ndarray, sched: noise_mod.NoiseSchedule,
                   k: int, eval_mode: bool = False) -> np.ndarray:
        """Per-dimension scale for the increment starting at flow time t."""
        delta = 1.0 / self.n_steps
        learned = self._sigma_learned_fwd(t, h)
        if eval_mode:
            if sched.regime == "sde":
                return np.full_like(learned, sched.sde_sigma0 * math.sqrt(delta))
            return learned
        return noise_mod.sigma_total(learned, t, k, sched, delta)

    def sample_action(self, h: np.ndarray, sched: noise_mod.NoiseSchedule,
                      k: int, rng: np.random.Generator,
                      eval_mode: bool = False) -> ActionSample:
        """Sample a batch of actions; h is the fused embedding (B, D)."""
        h = np.atleast_2d(h)
        B = h.shape[0]
        N = self.n_steps
        delta = 1.0 / N
        x = rng.standard_normal((B, ACTION_DIM))
        path = [x.copy()]
        means = np.empty((N, B, ACTION_DIM))
        sigmas = np.empty((N, B, ACTION_DIM))
        logp = np.zeros(B)
        for n in range(N):
            t = n / N
            mean = x + delta * self._velocity_fwd(x, t, h)
            sigma = self.step_sigma(t, h, sched, k, eval_mode=eval_mode)
            eps = rng.standard_normal((B, ACTION_DIM))
            x = mean + sigma * eps
            path.append(x.copy())
            means[n], sigmas[n] = mean, sigma
            z = (x - mean) / sigma
            logp += (-0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z).sum(axis=-1)
        return ActionSample(actions=np.clip(x, -1.0, 1.0), log_prob=logp,
                            flow_path=np.stack(path), means=means, sigmas=sigmas)

    def log_prob_under(self, flow_path: np.ndarray, h: ad.Tensor,
                       sched: noise_mod.NoiseSchedule, k: int,
                       eval_mode: bool = False) -> ad.Tensor:
        """Differentiable log-density of recorded increments under current params.

        flow_path is (N+1, B, 3) from a previous sample; h is the (possibly
        batched) fused embedding as a graph tensor, so gradients reach both
        policy and fusion parameters.
        """
        N = self.n_steps
        if flow_path.shape[0] != N + 1 or flow_path.shape[-1] != ACTION_DIM:
            raise ValueError(f"flow path shape {flow_path.shape} does not match "
                             f"{N} integration steps")
        B = flow_path.shape[1]
        delta = 1.0 / N
        total = None
        for n in range(N):
            t = n / N
            xn = ad.Tensor(flow_path[n])
            tcol = ad.Tensor(np.full((B, 1), t))
            v = self.velocity(ad.concat([xn, tcol, h], axis=-1))
            mean = ad.add(xn, ad.mul(v, delta))
            if sched.regime == "sde":
                sigma = ad.Tensor(np.full((B, ACTION_DIM),
                                          sched.sde_sigma0 * math.sqrt(delta)))
            else:
                raw = self.sigma_head(ad.concat([h, tcol], axis=-1))
                learned = ad.softplus(raw)
                if eval_mode or sched.regime == "flow":
                    sigma = learned
                else:
                    sigma = noise_mod.sigma_total(learned, t, k, sched, delta)
            z = ad.div(ad.sub(ad.Tensor(flow_path[n + 1]), mean), sigma)
            term = ad.tsum(
                ad.sub(ad.mul(ad.add(ad.log(sigma), ad.mul(ad.square(z), 0.5)), -1.0),
                       0.5 * LOG_2PI),
                axis=-1)
            total = term if total is None else ad.add(total, term)
        return total


class ValueNet:
    """MLP critic over the fused embedding; output layer starts at zero."""

    def __init__(self, rng: np.random.Generator, embed_dim: int, hidden: int = 64):
        self.mlp = MLP(rng, [embed_dim, hidden, hidden, 1], name="value/mlp",
                       zero_last=True)

    def __call__(self, h) -> ad.Tensor:
        out = self.mlp(h if isinstance(h, ad.Tensor) else ad.Tensor(np.atleast_2d(h)))
        return ad.reshape(out, out.shape[:-1])

    def params(self) -> dict:
        return self.mlp.params()
