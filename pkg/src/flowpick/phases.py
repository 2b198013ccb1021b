"""Online Reach/Place/Leave phase inference and step-level dense rewards.

Phase transitions are stability-driven: the gripper/placement condition must
hold for several consecutive steps, and a dwell hysteresis forbids two
transitions closer than the stability horizon. On every transition the
reference distance of the newly active phase is re-measured from the current
state and the first step of the new phase emits zero reward.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .env import Geometry, WorldState


class Phase(enum.IntEnum):
    REACH = 0
    PLACE = 1
    LEAVE = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass
class RewardConfig:
    lambda_dense: float = 0.3
    reward_clip: float = 1.0
    stability_horizon: int = 5          # H: min steps between transitions
    place_entry_attach_steps: int = 3
    leave_entry_settle_steps: int = 3
    sparse: bool = False
    clip_enabled: bool = True

    def __post_init__(self):
        if self.lambda_dense < 0:
            raise ValueError("lambda_dense must be >= 0")
        if self.reward_clip <= 0:
            raise ValueError("reward_clip must be > 0")


_REF_FLOOR = 1e-6


class PhaseTracker:
    """Per-episode phase state: active phase, reference distances, counters."""

    def __init__(self, state: WorldState, cfg: RewardConfig = RewardConfig(),
                 geom: Geometry = Geometry()):
        self.cfg = cfg
        self.geom = geom
        self.phase = Phase.REACH
        self.d_ro_ref = max(self._d_ro(state), _REF_FLOOR)
        self.d_od_ref = max(self._d_od(state), _REF_FLOOR)
        self.prev_d_ro, self.prev_d_od = self.normalized_distances(state)
        self.dwell_counter = 0
        self.attach_run = 0
        self.settle_run = 0

    @staticmethod
    def _d_ro(state):
        return float(np.linalg.norm(state.p_eef - state.p_obj))

    @staticmethod
    def _d_od(state):
        return float(np.linalg.norm(state.p_obj - state.p_dest))

    def normalized_distances(self, state: WorldState):
        """Distances over their references, clipped to [0, 1]."""
        if self.d_ro_ref <= 0 or self.d_od_ref <= 0:
            raise ValueError("reference distances not initialized")
        d_ro = min(max(self._d_ro(state) / self.d_ro_ref, 0.0), 1.0)
        d_od = min(max(self._d_od(state) / self.d_od_ref, 0.0), 1.0)
        return d_ro, d_od

    def _update_runs(self, state: WorldState):
        self.attach_run = self.attach_run + 1 if state.attached else 0
        settled = (not state.attached
                   and self._d_od(state) <= self.geom.dest_radius)
        self.settle_run = self.settle_run + 1 if settled else 0

    def update_phase(self, state: WorldState) -> bool:
        """Advance the phase machine; returns True if a transition fired.

        Leave has priority over Place when both entry conditions hold. Phases
        only move forward within an episode.
        """
        cfg = self.cfg
        self._update_runs(state)
        self.dwell_counter += 1
        if self.dwell_counter < cfg.stability_horizon:
            return False
        leave_ok = (self.phase < Phase.LEAVE
                    and self.settle_run >= cfg.leave_entry_settle_steps)
        place_ok = (self.phase == Phase.REACH
                    and self.attach_run >= cfg.place_entry_attach_steps)
        if leave_ok:
            self.phase = Phase.LEAVE
            # normalize retreat by the leave radius so separation beyond the
            # grasp point still registers as progress
            self.d_ro_ref = max(self._d_ro(state), self.geom.leave_radius)
            self.prev_d_ro, _ = self.normalized_distances(state)
        elif place_ok:
            self.phase = Phase.PLACE
            self.d_od_ref = max(self._d_od(state), _REF_FLOOR)
            _, self.prev_d_od = self.normalized_distances(state)
        else:
            return False
        self.dwell_counter = 0
        return True

    def dense_reward(self, state: WorldState, transitioned: bool) -> float:
        """Signed progress of the phase-relevant normalized distance."""
        cfg = self.cfg
        d_ro, d_od = self.normalized_distances(state)
        if transitioned:
            r = 0.0
        elif self.phase == Phase.REACH:
            r = cfg.lambda_dense * (self.prev_d_ro - d_ro)
        elif self.phase == Phase.PLACE:
            r = cfg.lambda_dense * (self.prev_d_od - d_od)
        else:
            r = cfg.lambda_dense * (d_ro - self.prev_d_ro)
        if cfg.clip_enabled:
            r = min(max(r, -cfg.reward_clip), cfg.reward_clip)
        self.prev_d_ro, self.prev_d_od = d_ro, d_od
        return r

    def observe_step(self, state: WorldState) -> tuple:
        """Full per-step update: phase inference then reward. Returns (phase, r)."""
        transitioned = self.update_phase(state)
        return self.phase, self.dense_reward(state, transitioned)


def total_step_reward(dense: float, success_now: bool, cfg: RewardConfig) -> float:
    """Dense progress term plus the terminal success bonus."""
    d = 0.0 if cfg.sparse else dense
    return d + (1.0 if success_now else 0.0)
