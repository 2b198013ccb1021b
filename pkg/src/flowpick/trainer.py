"""Actor-critic PPO with GAE over rollouts from parallel environments.

Rollouts are collected in lockstep against an immutable parameter snapshot;
the clipped-surrogate update then has exclusive access to the parameters.
Ratios are exact because the flow sampler records its full integration path.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import env as env_mod
from . import noise as noise_mod
from .env import Geometry, Perturbation
from .fusion import FusionDims, FusionParams, TokenEncoder, fuse
from .phases import PhaseTracker, RewardConfig, total_step_reward
from .policy import FlowPolicy, ValueNet


@dataclass
class TrainConfig:
    lr_policy: float = 5e-6
    lr_value: float = 1e-4
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    grad_clip: float = 1.0
    batch_size: int = 512          # PPO minibatch size
    n_envs: int = 16
    rollout_epochs: int = 4
    max_episode_len: int = 240
    total_steps: int = 100
    reward_mode: str = "dense"
    regime: str = "scan"
    fusion_enabled: bool = True
    value_coef: float = 0.5
    checkpoint_every: int = 10
    eval_episodes_per_step: int = 8

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be > 0")
        if self.reward_mode not in ("sparse", "dense"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")


class Model:
    """Bundle of encoder, fusion, policy, and value nets with one embed path."""

    def __init__(self, seed: int, dims: FusionDims = FusionDims(),
                 geom: Geometry = Geometry(), n_flow_steps: int = 4,
                 init_sigma: float = 0.08, fusion_enabled: bool = True):
        rng = np.random.default_rng(seed)
        self.dims = dims
        self.geom = geom
        self.fusion_enabled = fusion_enabled
        self.encoder = TokenEncoder(seed + 1, dims, geom)
        self.fusion = FusionParams(rng, dims)
        self.embed_dim = dims.token_count * dims.C
        self.policy = FlowPolicy(rng, self.embed_dim, n_steps=n_flow_steps,
                                 init_sigma=init_sigma)
        self.value = ValueNet(rng, self.embed_dim)

    def embed(self, features, canonical, view_id: int = 0) -> ad.Tensor:
        tokens = self.encoder.encode(features, canonical)
        fuse(tokens, self.fusion, view_id=view_id, enabled=self.fusion_enabled)
        B = tokens.fused.shape[0]
        return ad.reshape(tokens.fused, (B, self.embed_dim))

    def params(self) -> dict:
        out = {}
        for group in (self.encoder.params(), self.fusion.params(),
                      self.policy.params(), self.value.params()):
            out.update(group)
        return out

    def policy_group(self) -> dict:
        out = {}
        for group in (self.encoder.params(), self.fusion.params(), self.policy.params()):
            out.update(group)
        return out

    def value_group(self) -> dict:
        return self.value.params()

    def snapshot(self) -> dict:
        return {name: p.data.copy() for name, p in self.params().items()}

    def restore(self, snap: dict):
        for name, p in self.params().items():
            p.data = snap[name].copy()


@dataclass
class RolloutBuffer:
    features: np.ndarray = None      # (T, F)
    canonical: np.ndarray = None     # (T, Gdim)
    flow_paths: np.ndarray = None    # (T, N+1, 3)
    log_probs: np.ndarray = None     # (T,)
    rewards: np.ndarray = None
    values: np.ndarray = None
    terminals: np.ndarray = None     # episode ended in success here
    dones: np.ndarray = None         # episode boundary (success or truncation)
    phases: np.ndarray = None
    env_ids: np.ndarray = None
    bootstrap: dict = field(default_factory=dict)  # env_id -> V(s_{T+1})
    successes: dict = field(default_factory=dict)  # env_id -> bool

    def __len__(self):
        return 0 if self.rewards is None else len(self.rewards)


def collect_rollouts(model: Model, cfg: TrainConfig, sched: noise_mod.NoiseSchedule,
                     reward_cfg: RewardConfig, perts, k: int,
                     seed: int) -> RolloutBuffer:
    """Step n_envs environments in lockstep until done or the episode cap.

    perts is one Perturbation per environment; environment i resets with
    seed + i, so the whole collection is deterministic given (seed, params).
    """
    rng = np.random.default_rng(seed)
    reward_cfg.sparse = cfg.reward_mode == "sparse"
    n = cfg.n_envs
    states = [env_mod.reset(seed + i, perts[i], model.geom) for i in range(n)]
    trackers = [PhaseTracker(states[i], reward_cfg, model.geom) for i in range(n)]
    done = [False] * n
    rows = {key: [] for key in ("features", "canonical", "flow_paths", "log_probs",
                                "rewards", "values", "terminals", "dones",
                                "phases", "env_ids")}
    buf = RolloutBuffer()
    for t in range(cfg.max_episode_len):
        active = [i for i in range(n) if not done[i]]
        if not active:
            break
        obs = [env_mod.observe(states[i], perts[i], model.geom) for i in active]
        feats = np.stack([o.features for o in obs])
        canon = np.stack([o.canonical_geometry for o in obs])
        h = model.embed(feats, canon)
        sample = model.policy.sample_action(h.data, sched, k, rng)
        vals = model.value(h).data
        for j, i in enumerate(active):
            new_state = env_mod.apply_normalized_action(states[i], sample.actions[j],
                                                        model.geom)
            phase, dense = trackers[i].observe_step(new_state)
            succ = env_mod.is_success(new_state, model.geom)
            r = total_step_reward(dense, succ, reward_cfg)
            ep_over = succ or t + 1 == cfg.max_episode_len
            rows["features"].append(feats[j])
            rows["canonical"].append(canon[j])
            rows["flow_paths"].append(sample.flow_path[:, j, :])
            rows["log_probs"].append(sample.log_prob[j])
            rows["rewards"].append(r)
            rows["values"].append(vals[j])
            rows["terminals"].append(bool(succ))
            rows["dones"].append(bool(ep_over))
            rows["phases"].append(int(phase))
            rows["env_ids"].append(i)
            states[i] = new_state
            if ep_over:
                done[i] = True
                buf.successes[i] = bool(succ)
                if not succ:  # truncation: bootstrap from the final state
                    fin = env_mod.observe(new_state, perts[i], model.geom)
                    hv = model.embed(fin.features, fin.canonical_geometry)
                    buf.bootstrap[i] = float(model.value(hv).data[0])
    buf.features = np.stack(rows["features"])
    buf.canonical = np.stack(rows["canonical"])
    buf.flow_paths = np.stack(rows["flow_paths"])
    for key in ("log_probs", "rewards", "values"):
        setattr(buf, key, np.asarray(rows[key], dtype=np.float64))
    for key in ("terminals", "dones"):
        setattr(buf, key, np.asarray(rows[key], dtype=bool))
    buf.phases = np.asarray(rows["phases"], dtype=int)
    buf.env_ids = np.asarray(rows["env_ids"], dtype=int)
    return buf


def compute_gae(buf: RolloutBuffer, cfg: TrainConfig, normalize: bool = True):
    """GAE advantages and returns; advantages normalized over the batch."""
    T = len(buf)
    adv = np.zeros(T)
    for env_id in np.unique(buf.env_ids):
        idx = np.flatnonzero(buf.env_ids == env_id)
        r = buf.rewards[idx]
        v = buf.values[idx]
        last_done = buf.dones[idx][-1]
        boot = buf.bootstrap.get(int(env_id), 0.0) if last_done else 0.0
        v_next = np.append(v[1:], boot if not buf.terminals[idx][-1] else 0.0)
        term = buf.terminals[idx].astype(np.float64)
        delta = r + cfg.gamma * v_next * (1.0 - term) - v
        a = 0.0
        out = np.zeros(len(idx))
        for j in range(len(idx) - 1, -1, -1):
            a = delta[j] + cfg.gamma * cfg.gae_lambda * (1.0 - term[j]) * a
            out[j] = a
        adv[idx] = out
    returns = adv + buf.values
    if normalize:
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    return adv, returns


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1 ** self.t)
            vhat = self.v[name] / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their joint global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _surrogate_terms(model: Model, buf: RolloutBuffer, idx, adv, cfg: TrainConfig,
                     sched, k):
    """Graph pieces of the clipped surrogate for the given transition indices."""
    h = model.embed(buf.features[idx], buf.canonical[idx])
    paths = np.transpose(buf.flow_paths[idx], (1, 0, 2))
    lp_new = model.policy.log_prob_under(paths, h, sched, k)
    ratio = ad.exp(ad.sub(lp_new, ad.Tensor(buf.log_probs[idx])))
    a = ad.Tensor(adv[idx])
    clipped = ad.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    surr = ad.minimum(ad.mul(ratio, a), ad.mul(clipped, a))
    return h, lp_new, ratio, surr


def eval_surrogate(model: Model, buf: RolloutBuffer, adv, cfg, sched, k) -> float:
    idx = np.arange(len(buf))
    _, _, _, surr = _surrogate_terms(model, buf, idx, adv, cfg, sched, k)
    return float(ad.tmean(surr).data)


def ppo_update(model: Model, buf: RolloutBuffer, adv, returns, cfg: TrainConfig,
               sched, k: int, opt_policy: Adam, opt_value: Adam, seed: int) -> dict:
    """Clipped-surrogate epochs over minibatches; rolls back on non-finite loss."""
    rng = np.random.default_rng(seed)
    snap = model.snapshot()
    all_params = model.params()
    surr_before = eval_surrogate(model, buf, adv, cfg, sched, k)
    ratios, clip_hits, kls = [], [], []
    grad_norm = 0.0
    T = len(buf)
    for _ in range(cfg.rollout_epochs):
        order = rng.permutation(T)
        for start in range(0, T, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ad.zero_grads(all_params)
            with ad.tape() as tp:
                h, lp_new, ratio, surr = _surrogate_terms(model, buf, idx, adv,
                                                          cfg, sched, k)
                policy_loss = ad.mul(ad.tmean(surr), -1.0)
                v = model.value(h)
                v_err = ad.sub(v, ad.Tensor(returns[idx]))
                value_loss = ad.tmean(ad.square(v_err))
                loss = ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef))
            if not np.isfinite(loss.data):
                model.restore(snap)
                return {"aborted": True, "surrogate_before": surr_before,
                        "surrogate_after": surr_before, "mean_ratio": float("nan"),
                        "clip_fraction": float("nan"), "approx_kl": float("nan"),
                        "grad_norm": float("nan")}
            tp.backward(loss)
            grad_norm = clip_grad_norm(all_params, cfg.grad_clip)
            opt_policy.step()
            opt_value.step()
            ratios.append(ratio.data.mean())
            clip_hits.append(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_ratio))
            kls.append(np.mean(buf.log_probs[idx] - lp_new.data))
    surr_after = eval_surrogate(model, buf, adv, cfg, sched, k)
    return {"aborted": False, "surrogate_before": surr_before,
            "surrogate_after": surr_after, "mean_ratio": float(np.mean(ratios)),
            "clip_fraction": float(np.mean(clip_hits)),
            "approx_kl": float(np.mean(kls)), "grad_norm": float(grad_norm)}


METRICS_HEADER = ["step", "mean_episode_reward", "rollout_success_rate",
                  "eval_success_rate", "mean_ratio", "clip_fraction", "approx_kl",
                  "surrogate_before", "surrogate_after", "sigma_floor",
                  "frac_reach", "frac_place", "frac_leave"]


def train(model: Model, cfg: TrainConfig, sched: noise_mod.NoiseSchedule,
          reward_cfg: RewardConfig, pert_sampler, out_dir: str, seed: int,
          eval_fn=None) -> list:
    """Alternate collect / GAE / update for total_steps iterations.

    pert_sampler(rng) yields one Perturbation per call; eval_fn(model, step)
    if given returns a success rate logged alongside training metrics.
    Writes metrics.csv and periodic checkpoints to out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    reward_cfg.sparse = cfg.reward_mode == "sparse"
    sched.regime = cfg.regime
    model.fusion_enabled = cfg.fusion_enabled
    opt_policy = Adam(model.policy_group(), cfg.lr_policy)
    opt_value = Adam(model.value_group(), cfg.lr_value)
    ss = np.random.SeedSequence(seed)
    metrics = []
    path = os.path.join(out_dir, "metrics.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for k in range(cfg.total_steps):
            child = ss.spawn(1)[0]
            step_seed = int(child.generate_state(1)[0] % (2**31 - 1))
            perts = [pert_sampler(np.random.default_rng(step_seed + 1000 + i))
                     for i in range(cfg.n_envs)]
            # Probe before the update so "success at step k" means the policy
            # produced by k optimizer iterations.
            eval_rate = eval_fn(model, k) if eval_fn is not None else float("nan")
            buf = collect_rollouts(model, cfg, sched, reward_cfg, perts, k, step_seed)
            adv, returns = compute_gae(buf, cfg)
            diag = ppo_update(model, buf, adv, returns, cfg, sched, k,
                              opt_policy, opt_value, step_seed + 7)
            n_eps = len(np.unique(buf.env_ids))
            ep_reward = float(buf.rewards.sum() / n_eps)
            succ_rate = float(np.mean([buf.successes.get(i, False)
                                       for i in range(cfg.n_envs)]))
            floor = noise_mod.sigma_min(0.5, k, sched) if sched.regime == "scan" else 0.0
            phase_fracs = [float(np.mean(buf.phases == p)) for p in (0, 1, 2)]
            row = [k, ep_reward, succ_rate, eval_rate, diag["mean_ratio"],
                   diag["clip_fraction"], diag["approx_kl"],
                   diag["surrogate_before"], diag["surrogate_after"], floor,
                   *phase_fracs]
            writer.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])
            metrics.append(dict(zip(METRICS_HEADER, row)))
            if (k + 1) % cfg.checkpoint_every == 0 or k + 1 == cfg.total_steps:
                ad.save_checkpoint(os.path.join(out_dir, f"checkpoint_{k + 1:04d}.ckpt"),
                                   model.params())
    return metrics
