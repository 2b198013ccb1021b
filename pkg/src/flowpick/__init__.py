"""Spatially-grounded RL fine-tuning of a flow-matching policy on a planar
pick-place task: token fusion, phase-inferred dense rewards, annealed
exploration noise, and a PPO trainer, all on a small float64 autodiff core."""

from . import autodiff, env, fusion, harness, noise, phases, policy, trainer

__all__ = ["autodiff", "env", "fusion", "harness", "noise", "phases",
           "policy", "trainer"]
