"""Acceptance suite.

One test per release criterion, each enforcing its stated tolerance and
printing a single PASS line with the measured quantity (run with -s or -v
to see them). The trend-comparison test trains real policies and dominates
the suite's runtime.
"""

import copy
import math
import time

import numpy as np
import pytest

import flowpick.autodiff as ad
import flowpick.env as env
import flowpick.harness as hn
import flowpick.noise as noise_mod
import flowpick.trainer as tr
from flowpick.env import Action, Geometry, Perturbation
from flowpick.fusion import (FusionDims, FusionParams, TokenSet,
                             attention_weights, fuse, project_spatial)
from flowpick.noise import NoiseSchedule, alpha, sigma_min, sigma_total
from flowpick.phases import Phase, PhaseTracker, RewardConfig
from flowpick.policy import ACTION_DIM, FlowPolicy, ValueNet
from flowpick.trainer import (Adam, Model, RolloutBuffer, TrainConfig,
                              clip_grad_norm, collect_rollouts, compute_gae,
                              ppo_update)

GEOM = Geometry()
SMALL_DIMS = FusionDims(L=2, Ls=2, G=1, C=6, Cs=6)


def report(name, detail):
    print(f"\n[acceptance] {name}: PASS ({detail})")


# ---------------------------------------------------------------------------
# 1. gradient fidelity

def _surrogate_fixture(seed, regime="scan"):
    """A 4-transition batch with everything the clipped surrogate needs."""
    rng = np.random.default_rng(seed)
    model = Model(seed, dims=SMALL_DIMS, geom=GEOM)
    sched = NoiseSchedule(regime=regime)
    feats = rng.standard_normal((4, env.feature_dim(GEOM))) * 0.3
    canon = rng.standard_normal((4, env.canonical_dim(GEOM))) * 0.3
    h = model.embed(feats, canon)
    sample = model.policy.sample_action(h.data, sched, k=3, rng=rng)
    adv = rng.standard_normal(4)
    returns = rng.standard_normal(4)
    cfg = TrainConfig()
    buf = RolloutBuffer()
    buf.features, buf.canonical = feats, canon
    buf.flow_paths = np.transpose(sample.flow_path, (1, 0, 2))
    buf.log_probs = sample.log_prob
    buf.rewards = np.zeros(4)
    return model, sched, buf, adv, returns, cfg


def test_gradient_fidelity():
    t0 = time.time()
    worst = {"fusion": 0.0, "velocity": 0.0, "sigma": 0.0, "value": 0.0,
             "surrogate": 0.0}
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)

        # fusion block
        params = FusionParams(rng, SMALL_DIMS)
        params.gate.data[:] = rng.normal(0, 0.3, params.gate.shape)
        tokens = TokenSet(
            ad.Tensor(rng.standard_normal((1, SMALL_DIMS.L, SMALL_DIMS.C))),
            ad.Tensor(rng.standard_normal((1, SMALL_DIMS.Ls, SMALL_DIMS.Cs))),
            ad.Tensor(rng.standard_normal((1, SMALL_DIMS.G, SMALL_DIMS.Cs))))

        def f_fusion():
            out = fuse(TokenSet(tokens.visual, tokens.spatial_grid,
                                tokens.spatial_global), params)
            return ad.tsum(ad.square(out.fused))

        worst["fusion"] = max(worst["fusion"], ad.finite_diff_check(
            f_fusion, params.params(), rng=rng, max_entries_per_param=2))

        # velocity net, sigma head, value net
        pol = FlowPolicy(rng, embed_dim=6)
        x = rng.standard_normal((2, ACTION_DIM + 1 + 6)) * 0.5
        worst["velocity"] = max(worst["velocity"], ad.finite_diff_check(
            lambda: ad.tsum(ad.square(pol.velocity(ad.Tensor(x)))),
            pol.velocity.params(), rng=rng, max_entries_per_param=2))
        xs = rng.standard_normal((2, 7)) * 0.5
        worst["sigma"] = max(worst["sigma"], ad.finite_diff_check(
            lambda: ad.tsum(ad.softplus(pol.sigma_head(ad.Tensor(xs)))),
            pol.sigma_head.params(), rng=rng, max_entries_per_param=2))
        vn = ValueNet(rng, 6)
        hv = rng.standard_normal((3, 6))
        worst["value"] = max(worst["value"], ad.finite_diff_check(
            lambda: ad.tsum(ad.square(vn(hv))), vn.params(), rng=rng,
            max_entries_per_param=2))

        # full PPO surrogate on a 4-transition batch
        model, sched, buf, adv, returns, cfg = _surrogate_fixture(seed)

        def f_surr():
            idx = np.arange(4)
            _, _, _, surr = tr._surrogate_terms(model, buf, idx, adv, cfg,
                                                sched, 3)
            return ad.tmean(surr)

        worst["surrogate"] = max(worst["surrogate"], ad.finite_diff_check(
            f_surr, model.policy_group(), rng=rng, max_entries_per_param=1))

    for name in ("fusion", "velocity", "sigma", "value"):
        assert worst[name] < 1e-4, f"{name} gradient error {worst[name]}"
    assert worst["surrogate"] < 1e-3, f"surrogate gradient error {worst['surrogate']}"
    dt = time.time() - t0
    assert dt < 60.0, f"gradient-fidelity suite took {dt:.1f}s"
    report("gradient fidelity",
           f"100 seeds, worst errors {({k: float(f'{v:.2e}') for k, v in worst.items()})}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2. reward telescoping

def test_reward_telescoping():
    t0 = time.time()
    cfg = RewardConfig(clip_enabled=False)
    worst = 0.0
    n_segments = 0
    for traj in range(1000):
        rng = np.random.default_rng(traj)
        state = env.reset(traj, Perturbation(), GEOM)
        tracker = PhaseTracker(state, cfg, GEOM)
        ctrl = env.ScriptedController(GEOM)
        seg_sum = 0.0
        seg_start = {"d_ro": tracker.prev_d_ro, "d_od": tracker.prev_d_od}
        seg_phase = tracker.phase
        for _ in range(60):
            a = np.clip(ctrl.act(state) + rng.normal(0, 0.4, 3), -1, 1)
            state = env.apply_normalized_action(state, a, GEOM)
            transitioned = tracker.update_phase(state)
            r = tracker.dense_reward(state, transitioned)
            if transitioned:
                # close the finished segment: sum must equal lambda times the
                # signed change of the phase-relevant normalized distance
                end = {"d_ro": tracker.prev_d_ro, "d_od": tracker.prev_d_od}
                if seg_phase == Phase.REACH:
                    expect = cfg.lambda_dense * (seg_start["d_ro"] - end["d_ro"])
                elif seg_phase == Phase.PLACE:
                    expect = cfg.lambda_dense * (seg_start["d_od"] - end["d_od"])
                else:
                    expect = cfg.lambda_dense * (end["d_ro"] - seg_start["d_ro"])
                worst = max(worst, abs(seg_sum - expect))
                n_segments += 1
                # transition re-anchors the references; start a new segment
                seg_sum = 0.0
                seg_start = {"d_ro": tracker.prev_d_ro,
                             "d_od": tracker.prev_d_od}
                seg_phase = tracker.phase
            else:
                seg_sum += r
        end = {"d_ro": tracker.prev_d_ro, "d_od": tracker.prev_d_od}
        if seg_phase == Phase.REACH:
            expect = cfg.lambda_dense * (seg_start["d_ro"] - end["d_ro"])
        elif seg_phase == Phase.PLACE:
            expect = cfg.lambda_dense * (seg_start["d_od"] - end["d_od"])
        else:
            expect = cfg.lambda_dense * (end["d_ro"] - seg_start["d_ro"])
        worst = max(worst, abs(seg_sum - expect))
        n_segments += 1
    assert worst <= 1e-12, f"telescoping residual {worst}"
    dt = time.time() - t0
    assert dt < 60.0
    report("reward telescoping",
           f"1000 trajectories, {n_segments} segments, max residual {worst:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3. phase machine

def test_phase_machine():
    t0 = time.time()
    cfg = RewardConfig()
    for ep in range(10000):
        rng = np.random.default_rng(ep)
        state = env.reset(ep % 4000, Perturbation(), GEOM)
        tracker = PhaseTracker(state, cfg, GEOM)
        ctrl = env.ScriptedController(GEOM)
        phases = []
        noise_scale = rng.uniform(0.0, 0.8)
        for _ in range(int(rng.integers(20, 90))):
            a = np.clip(ctrl.act(state) + rng.normal(0, noise_scale, 3), -1, 1)
            state = env.apply_normalized_action(state, a, GEOM)
            tracker.update_phase(state)
            phases.append(int(tracker.phase))
        # Reach+ Place* Leave*: starts in Reach, never goes backward
        assert phases[0] in (0, 1, 2)
        assert all(a <= b for a, b in zip(phases, phases[1:])), f"episode {ep}"
        changes = [i for i in range(1, len(phases)) if phases[i] != phases[i - 1]]
        if changes:
            # index i means i + 1 machine updates have elapsed
            assert changes[0] + 1 >= cfg.stability_horizon, f"episode {ep}"
            assert (np.diff(changes) >= cfg.stability_horizon).all(), \
                f"episode {ep}"

    # scripted priority case: attach and settle predicates true simultaneously
    state = env.WorldState(p_eef=np.zeros(2), p_obj=np.array([0.02, 0.0]),
                           p_dest=np.array([0.02, 0.0]))
    tracker = PhaseTracker(state, cfg, GEOM)
    tracker.attach_run = cfg.place_entry_attach_steps
    tracker.settle_run = cfg.leave_entry_settle_steps
    tracker.dwell_counter = cfg.stability_horizon
    assert tracker.update_phase(state)
    assert tracker.phase == Phase.LEAVE
    dt = time.time() - t0
    assert dt < 120.0
    report("phase machine",
           f"10000 episodes monotone with hysteresis, priority case -> Leave, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 4. SCAN floor

def test_scan_floor():
    t0 = time.time()
    sched = NoiseSchedule()
    rng = np.random.default_rng(0)
    n = 0
    while n < 10 ** 5:
        t = float(rng.uniform(0.0, 0.999))
        k = int(rng.integers(0, 3 * sched.K))
        sl = rng.uniform(-4.0, 4.0, size=25)
        out = sigma_total(sl, t, k, sched, delta=0.25)
        assert np.all(out >= sigma_min(t, k, sched))
        n += sl.size
    # floor positive over (0, (N-1)/N] with N = 4
    for t in np.linspace(1e-6, 0.75, 500):
        assert sigma_min(float(t), 0, sched) > 0.0
    # exact identities
    for k in range(0, 2 * sched.K, 7):
        assert sigma_min(0.5, k, sched) == alpha(k, sched)
    assert alpha(0, sched) == sched.alpha0
    assert alpha(sched.K, sched) == pytest.approx(sched.alpha1, abs=1e-15)
    dt = time.time() - t0
    assert dt < 10.0
    report("noise floor", f"{n} samples above floor, sigma_min(0.5,k)=alpha(k), {dt:.1f}s")


# ---------------------------------------------------------------------------
# 5. regime separation

def test_regime_separation():
    t0 = time.time()
    results = {}
    for regime in ("sde", "flow", "scan"):
        model, sched, buf, adv, returns, cfg = _surrogate_fixture(7, regime)
        params = model.params()
        ad.zero_grads(params)
        with ad.tape() as tp:
            idx = np.arange(4)
            _, _, _, surr = tr._surrogate_terms(model, buf, idx, adv, cfg,
                                                sched, 2)
            loss = ad.mul(ad.tmean(surr), -1.0)
        tp.backward(loss)
        sig_grads = [p.grad for p in model.policy.sigma_params().values()]
        if regime == "sde":
            assert all(g is None or not np.any(g) for g in sig_grads), \
                "sigma-head gradient leaked into the sde regime"
            results[regime] = 0.0
        else:
            total = sum(float(np.abs(g).sum()) for g in sig_grads
                        if g is not None)
            assert total > 0.0, f"no sigma-head gradient in {regime}"
            results[regime] = total
    dt = time.time() - t0
    assert dt < 10.0
    report("regime separation",
           f"sigma-head grad L1: sde=0 exactly, flow={results['flow']:.2e}, "
           f"scan={results['scan']:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 6. PPO correctness

def test_ppo_correctness():
    t0 = time.time()
    # ratios at the sampling parameters
    model = Model(0, dims=SMALL_DIMS, geom=GEOM)
    cfg = TrainConfig(n_envs=2, max_episode_len=30, batch_size=16,
                      rollout_epochs=1, lr_policy=1e-5, lr_value=1e-4)
    sched = NoiseSchedule()
    perts = [Perturbation() for _ in range(cfg.n_envs)]
    buf = collect_rollouts(model, cfg, sched, RewardConfig(), perts, 0, seed=0)
    adv, returns = compute_gae(buf, cfg)
    idx = np.arange(len(buf))
    _, _, ratio, _ = tr._surrogate_terms(model, buf, idx, adv, cfg, sched, 0)
    ratio_err = float(np.abs(ratio.data - 1.0).max())
    assert ratio_err <= 1e-12, f"ratio at old params off by {ratio_err}"

    # GAE against the brute-force double sum
    rng = np.random.default_rng(1)
    worst_gae = 0.0
    for _ in range(500):
        T = int(rng.integers(1, 21))
        b = RolloutBuffer()
        b.rewards = rng.normal(size=T)
        b.values = rng.normal(size=T)
        b.terminals = np.zeros(T, dtype=bool)
        b.terminals[-1] = bool(rng.integers(0, 2))
        b.dones = np.zeros(T, dtype=bool)
        b.dones[-1] = True
        b.env_ids = np.zeros(T, dtype=int)
        boot = float(rng.normal())
        b.bootstrap = {0: boot}
        a, _ = compute_gae(b, cfg, normalize=False)
        v_next = np.append(b.values[1:], 0.0 if b.terminals[-1] else boot)
        delta = b.rewards + cfg.gamma * v_next * (1.0 - b.terminals) - b.values
        ref = np.zeros(T)
        for t in range(T):
            acc = 0.0
            for l in range(T - t):
                acc += (cfg.gamma * cfg.gae_lambda) ** l * delta[t + l]
                if b.terminals[t + l]:
                    break
            ref[t] = acc
        worst_gae = max(worst_gae, float(np.abs(a - ref).max()))
    assert worst_gae <= 1e-10, f"GAE deviates from brute force by {worst_gae}"

    # post-clip gradient norm
    params = model.params()
    ad.zero_grads(params)
    with ad.tape() as tp:
        _, _, _, surr = tr._surrogate_terms(model, buf, idx, adv, cfg, sched, 0)
        loss = ad.mul(ad.tmean(surr), -1.0)
    tp.backward(loss)
    clip_grad_norm(params, cfg.grad_clip)
    post = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params.values()
                         if p.grad is not None))
    assert post <= cfg.grad_clip + 1e-12

    # one small-step update never decreases the clipped surrogate on its batch
    diag = ppo_update(model, buf, adv, returns, cfg, sched, 0,
                      Adam(model.policy_group(), cfg.lr_policy),
                      Adam(model.value_group(), cfg.lr_value), seed=0)
    assert not diag["aborted"]
    assert diag["surrogate_after"] >= diag["surrogate_before"] - 1e-10
    dt = time.time() - t0
    assert dt < 60.0
    report("actor-critic update",
           f"ratio err {ratio_err:.1e}, GAE err {worst_gae:.1e}, post-clip norm "
           f"{post:.3f}, surrogate {diag['surrogate_before']:.2e} -> "
           f"{diag['surrogate_after']:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 7. fusion identity and isolation

def test_fusion_identity_and_isolation():
    t0 = time.time()
    dims = FusionDims()
    rng = np.random.default_rng(0)
    params = FusionParams(rng, dims)
    vis = ad.Tensor(rng.standard_normal((3, dims.L, dims.C)),
                    requires_grad=True)
    grid = ad.Tensor(rng.standard_normal((3, dims.Ls, dims.Cs)))
    glob = ad.Tensor(rng.standard_normal((3, dims.G, dims.Cs)))

    out = fuse(TokenSet(vis, grid, glob), params)
    assert out.fused.data[:, :dims.L, :].tobytes() == vis.data.tobytes(), \
        "zero-init fusion is not a bit-exact identity"

    params.gate.data[:] = 0.4
    with ad.tape() as tp:
        out = fuse(TokenSet(vis, grid, glob), params)
        loss = ad.tsum(ad.square(out.fused))
    tp.backward(loss)
    assert grid.grad is None and glob.grad is None, \
        "spatial token sources received gradient"

    z = project_spatial(grid, params, view_id=0)
    attn = attention_weights(vis, z, params)
    row_err = float(np.abs(attn.sum(axis=-1) - 1.0).max())
    assert row_err <= 1e-12
    dt = time.time() - t0
    assert dt < 10.0
    report("fusion identity",
           f"bit-exact identity, isolated spatial sources, attention row err "
           f"{row_err:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 8. trend reproduction (slow: trains real policies over 5 seeds)

def test_trend_reproduction(tmp_path):
    t0 = time.time()
    cfg = hn.desk_config()
    seeds = [0, 1, 2, 3, 4]
    results = hn.trend_report(cfg, seeds, out_dir=str(tmp_path / "trends"))

    def med(vals):
        return float(np.median([math.inf if v is None else v for v in vals]))

    it_dense = med([results[s]["iters_to_threshold"]["dense_scan"] for s in seeds])
    it_sparse = med([results[s]["iters_to_threshold"]["sparse_flow"] for s in seeds])
    ho = {cell: med([results[s]["heldout"][cell] for s in seeds])
          for cell in ("dense_scan", "dense_flow", "sparse_flow")}
    fu_on = med([results[s]["fusion_view_eval"]["on"] for s in seeds])
    fu_off = med([results[s]["fusion_view_eval"]["off"] for s in seeds])

    assert it_dense <= it_sparse, \
        f"dense reward slower to 80% train success ({it_dense} > {it_sparse})"
    assert ho["dense_scan"] >= ho["dense_flow"], \
        f"annealed floor hurt held-out success ({ho})"
    assert ho["dense_flow"] > ho["sparse_flow"], \
        f"dense reward did not beat sparse held-out ({ho})"
    assert fu_on >= fu_off, \
        f"fusion did not help under view perturbation ({fu_on} < {fu_off})"
    dt = time.time() - t0
    report("trend reproduction",
           f"median iters to 80%: dense {it_dense} <= sparse {it_sparse}; "
           f"held-out {ho['dense_scan']:.3f} >= {ho['dense_flow']:.3f} > "
           f"{ho['sparse_flow']:.3f}; no-RL fusion {fu_on:.3f} >= {fu_off:.3f}; "
           f"{dt / 60:.1f} min")


# ---------------------------------------------------------------------------
# 9. determinism

def test_byte_identical_reruns(tmp_path):
    t0 = time.time()
    cfg = copy.deepcopy(hn.DEFAULT_CONFIG)
    cfg["train"].update(total_steps=2, n_envs=4, max_episode_len=60,
                        checkpoint_every=1, eval_episodes_per_step=2)
    cfg["pretrain"].update(n_demos=4, steps=50)
    blobs = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        hn.run_training(cfg, seed=5, out_dir=str(out))
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert blobs[0].keys() == blobs[1].keys()
    for name in blobs[0]:
        assert blobs[0][name] == blobs[1][name], f"{name} differs between runs"
    dt = time.time() - t0
    assert dt < 300.0
    report("determinism",
           f"two runs, {len(blobs[0])} files byte-identical, {dt:.1f}s")
