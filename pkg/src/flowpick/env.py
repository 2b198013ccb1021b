"""Deterministic planar pick-place simulator with distractor clutter.

The workspace is the square [-1, 1]^2. An end-effector moves by bounded
per-step displacements, can attach the object when close enough with the
gripper closed, and succeeds once the object rests on the destination and
the end-effector has retreated. Spatial perturbations affect only the
observation (camera rotation/translation) and the initial placement, never
the dynamics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Geometry:
    """Workspace constants. Sized so an optimal episode takes ~60-90 steps."""
    a_max: float = 0.05
    grasp_radius: float = 0.08
    dest_radius: float = 0.08
    leave_radius: float = 0.15
    bound: float = 1.0
    placement_margin: float = 0.85
    max_distractors: int = 4


@dataclass
class Perturbation:
    """Observation-side camera shift plus initial-state shift."""
    view_rotation: float = 0.0
    view_translation: tuple = (0.0, 0.0)
    init_shift: tuple = (0.0, 0.0)
    clutter_count: int = 0

    def key(self):
        return (round(self.view_rotation, 9), tuple(np.round(self.view_translation, 9)),
                tuple(np.round(self.init_shift, 9)), int(self.clutter_count))


@dataclass
class WorldState:
    p_eef: np.ndarray
    p_obj: np.ndarray
    p_dest: np.ndarray
    distractors: list = field(default_factory=list)
    gripper_open: bool = True
    attached: bool = False
    step_index: int = 0

    def copy(self):
        return WorldState(self.p_eef.copy(), self.p_obj.copy(), self.p_dest.copy(),
                          [d.copy() for d in self.distractors],
                          self.gripper_open, self.attached, self.step_index)


@dataclass
class Action:
    delta: np.ndarray
    gripper_cmd: float


@dataclass
class Observation:
    features: np.ndarray           # view-frame coordinates plus flags
    canonical_geometry: np.ndarray  # view-invariant relative displacements


class PlacementError(RuntimeError):
    pass


def reset(seed: int, pert: Perturbation, geom: Geometry = Geometry()) -> WorldState:
    """Deterministic initial state with minimum pairwise entity separation."""
    rng = np.random.default_rng(seed)
    m = geom.placement_margin
    min_sep = 2.0 * geom.grasp_radius
    shift = np.asarray(pert.init_shift, dtype=np.float64)
    n_clutter = min(int(pert.clutter_count), geom.max_distractors)
    for _ in range(200):
        pts = rng.uniform(-m, m, size=(3 + n_clutter, 2))
        pts[1] += shift  # object
        pts[2] += shift  # destination
        if np.abs(pts).max() > geom.bound:
            continue
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        if d.min() >= min_sep:
            return WorldState(p_eef=pts[0], p_obj=pts[1], p_dest=pts[2],
                              distractors=[pts[3 + i] for i in range(n_clutter)])
    raise PlacementError(f"no feasible placement for seed={seed} after 200 attempts")


def step(state: WorldState, action: Action, geom: Geometry = Geometry()) -> WorldState:
    """Apply one action; all inputs are clamped, so this never fails."""
    nxt = state.copy()
    delta = np.asarray(action.delta, dtype=np.float64)
    norm = np.linalg.norm(delta)
    if norm > geom.a_max:
        delta = delta * (geom.a_max / norm)
    eef_new = np.clip(nxt.p_eef + delta, -geom.bound, geom.bound)
    if nxt.attached:
        nxt.p_obj = np.clip(nxt.p_obj + (eef_new - nxt.p_eef), -geom.bound, geom.bound)
    nxt.p_eef = eef_new
    if action.gripper_cmd >= 0.0:
        nxt.gripper_open = False
        if np.linalg.norm(nxt.p_eef - nxt.p_obj) <= geom.grasp_radius:
            nxt.attached = True
    else:
        nxt.gripper_open = True
        nxt.attached = False
    nxt.step_index += 1
    return nxt


def _view(p: np.ndarray, pert: Perturbation) -> np.ndarray:
    c, s = np.cos(pert.view_rotation), np.sin(pert.view_rotation)
    rot = np.array([[c, -s], [s, c]])
    return rot @ p + np.asarray(pert.view_translation, dtype=np.float64)


def observe(state: WorldState, pert: Perturbation, geom: Geometry = Geometry()) -> Observation:
    """View-frame features plus view-invariant canonical geometry."""
    feats = [
        _view(state.p_eef, pert),
        _view(state.p_obj, pert),
        _view(state.p_dest, pert),
        [1.0 if state.gripper_open else 0.0, 1.0 if state.attached else 0.0],
    ]
    canon = [
        state.p_obj - state.p_eef,
        state.p_dest - state.p_obj,
        state.p_dest - state.p_eef,
    ]
    for i in range(geom.max_distractors):
        if i < len(state.distractors):
            feats.append(_view(state.distractors[i], pert))
            canon.append(state.distractors[i] - state.p_obj)
        else:
            feats.append(np.zeros(2))
            canon.append(np.zeros(2))
    return Observation(features=np.concatenate(feats),
                       canonical_geometry=np.concatenate(canon))


def feature_dim(geom: Geometry = Geometry()) -> int:
    return 8 + 2 * geom.max_distractors


def canonical_dim(geom: Geometry = Geometry()) -> int:
    return 6 + 2 * geom.max_distractors


def is_success(state: WorldState, geom: Geometry = Geometry()) -> bool:
    """Object placed, released, and end-effector retreated (boundaries inclusive)."""
    return (not state.attached
            and np.linalg.norm(state.p_obj - state.p_dest) <= geom.dest_radius
            and np.linalg.norm(state.p_eef - state.p_obj) >= geom.leave_radius)


TRAJECTORY_HEADER = ["step_index", "eef_x", "eef_y", "obj_x", "obj_y",
                     "dest_x", "dest_y", "gripper_open", "attached", "phase", "reward"]


def write_trajectory_log(path, records):
    """One CSV row per step; records are dicts keyed by TRAJECTORY_HEADER."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_HEADER)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec)


def trajectory_record(state: WorldState, phase: str, reward: float) -> dict:
    return {
        "step_index": state.step_index,
        "eef_x": f"{state.p_eef[0]:.12g}", "eef_y": f"{state.p_eef[1]:.12g}",
        "obj_x": f"{state.p_obj[0]:.12g}", "obj_y": f"{state.p_obj[1]:.12g}",
        "dest_x": f"{state.p_dest[0]:.12g}", "dest_y": f"{state.p_dest[1]:.12g}",
        "gripper_open": int(state.gripper_open), "attached": int(state.attached),
        "phase": phase, "reward": f"{reward:.12g}",
    }


class ScriptedController:
    """Hand-coded pick-place policy used as an oracle and demo source.

    Returns actions in normalized units: delta in [-1, 1]^2 (scaled by a_max
    on application) and gripper command in [-1, 1].
    """

    def __init__(self, geom: Geometry = Geometry()):
        self.geom = geom

    def act(self, state: WorldState) -> np.ndarray:
        g = self.geom
        if not state.attached:
            on_dest = np.linalg.norm(state.p_obj - state.p_dest) <= 0.6 * g.dest_radius
            if on_dest and state.gripper_open:
                # retreat until clear of the object
                away = state.p_eef - state.p_obj
                n = np.linalg.norm(away)
                direction = away / n if n > 1e-9 else np.array([1.0, 0.0])
                return np.array([direction[0], direction[1], -1.0])
            to_obj = state.p_obj - state.p_eef
            d = np.linalg.norm(to_obj)
            if d > 0.5 * g.grasp_radius:
                step_vec = to_obj / max(d / g.a_max, 1.0) / g.a_max
                return np.array([step_vec[0], step_vec[1], -1.0])
            return np.array([0.0, 0.0, 1.0])
        to_dest = state.p_dest - state.p_obj
        d = np.linalg.norm(to_dest)
        if d > 0.5 * g.dest_radius:
            step_vec = to_dest / max(d / g.a_max, 1.0) / g.a_max
            return np.array([step_vec[0], step_vec[1], 1.0])
        return np.array([0.0, 0.0, -1.0])


def apply_normalized_action(state: WorldState, a: np.ndarray,
                            geom: Geometry = Geometry()) -> WorldState:
    """Map a normalized action in [-1, 1]^3 onto the simulator and step."""
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    return step(state, Action(delta=a[:2] * geom.a_max, gripper_cmd=a[2]), geom)
