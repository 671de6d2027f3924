"""Action chunks, temporal ensembling and chunk execution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from . import kinematics as kin
from .errors import IkChainFailure, NonConvergent
from .kinematics import ArmModel, JointConfig

MODES = ("absolute", "delta", "end_effector")
MODE_ALIASES = {"ee": "end_effector", "abs": "absolute"}
GRIPPER_SWITCH_FRACTION = 0.5


def normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown action mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True, eq=False)
class ActionChunk:
    """K joint-position actions toward ``target``.

    ``actions`` are absolute configurations in every mode. In delta mode
    ``deltas`` holds the per-step joint increments the executor integrates.
    """

    K: int
    actions: tuple
    mode: str
    target: JointConfig
    deltas: np.ndarray | None = None

    def __post_init__(self):
        if self.K < 1 or len(self.actions) != self.K:
            raise ValueError("chunk must hold K >= 1 actions")
        if not all(np.all(np.isfinite(a.q)) for a in self.actions):
            raise ValueError("chunk actions must be finite")

    def as_array(self) -> np.ndarray:
        """K x 8 label matrix: 7 joints plus gripper open flag."""
        return np.array([a.as_vector() for a in self.actions])


def _gripper_schedule(g_from: str, g_to: str, K: int) -> list[str]:
    return [g_to if k / K >= GRIPPER_SWITCH_FRACTION else g_from for k in range(1, K + 1)]


def _ee_waypoints(arm: ArmModel, q_now: JointConfig, q_target: JointConfig, K: int) -> list[np.ndarray]:
    """Straight-line positions and constant-rate axis-angle orientations."""
    T0 = kin.forward_kinematics(arm, q_now).ee
    T1 = kin.forward_kinematics(arm, q_target).ee
    R0, R1 = T0[:3, :3], T1[:3, :3]
    dR = R0.T @ R1
    angle = geo.rotation_angle(dR)
    if angle > 1e-9:
        w = np.array([dR[2, 1] - dR[1, 2], dR[0, 2] - dR[2, 0], dR[1, 0] - dR[0, 1]])
        if np.linalg.norm(w) < 1e-9:
            # half-turn: axis from the symmetric part
            B = 0.5 * (dR + np.eye(3))
            w = B[:, int(np.argmax(np.diag(B)))]
        axis = w / np.linalg.norm(w)
    else:
        axis = np.array([0.0, 0.0, 1.0])
    out = []
    for k in range(1, K + 1):
        f = k / K
        R = R0 @ geo.rotation(axis, f * angle)
        out.append(geo.transform(R, (1 - f) * T0[:3, 3] + f * T1[:3, 3]))
    return out


def pose_constraints(T: np.ndarray, lever: float = 0.1) -> list[kin.PointConstraint]:
    """Three points on the EE frame pin its full pose."""
    cons = [kin.PointConstraint(kin.EE_FRAME, T[:3, 3].copy())]
    for off in (np.array([lever, 0.0, 0.0]), np.array([0.0, 0.0, lever])):
        cons.append(kin.PointConstraint(kin.EE_FRAME, geo.apply(T, off), offset=off))
    return cons


def make_chunk(
    q_now: JointConfig,
    q_target: JointConfig,
    K: int,
    mode: str = "absolute",
    arm: ArmModel | None = None,
) -> ActionChunk:
    mode = normalize_mode(mode)
    if K < 1:
        raise ValueError("K must be >= 1")
    grip = _gripper_schedule(q_now.gripper, q_target.gripper, K)
    if mode in ("absolute", "delta"):
        interp = kin.interpolate_joints(q_now, q_target, K)
        actions = tuple(c.with_gripper(g) for c, g in zip(interp, grip))
        deltas = None
        if mode == "delta":
            qs = np.array([q_now.q] + [a.q for a in actions])
            deltas = np.diff(qs, axis=0)
        return ActionChunk(K, actions, mode, q_target, deltas)
    if arm is None:
        raise ValueError("end_effector mode needs the arm model")
    actions = []
    cur = q_now
    for T, g in zip(_ee_waypoints(arm, q_now, q_target, K), grip):
        try:
            cur = kin.solve_ik(arm, cur, pose_constraints(T), tol=1e-4).config.with_gripper(g)
        except NonConvergent as exc:
            raise IkChainFailure(f"end-effector chunk step {len(actions) + 1}/{K}: {exc}", exc.best, exc.residual) from None
        actions.append(cur)
    return ActionChunk(K, tuple(actions), mode, q_target)


# --- temporal ensembling -------------------------------------------------


def ensemble_weights(n: int, m: float) -> np.ndarray:
    """Normalised w_i = exp(-m * i), i = 0 the oldest prediction."""
    if n < 1:
        raise ValueError("need at least one prediction")
    if m < 0:
        raise ValueError("decay m must be >= 0")
    w = np.exp(-m * np.arange(n, dtype=float))
    return w / w.sum()


def temporal_ensemble(history: Sequence[JointConfig], m: float) -> JointConfig:
    """Weighted average of overlapping predictions for one step, oldest first."""
    history = list(history)
    if len(history) == 1:
        return history[0]
    w = ensemble_weights(len(history), m)
    q = w @ np.array([h.q for h in history])
    open_w = float(sum(wi for wi, h in zip(w, history) if h.gripper == kin.OPEN))
    return JointConfig(q, kin.OPEN if open_w >= 0.5 else kin.CLOSED)


@dataclass
class EnsembleConfig:
    m: float = 0.0
    enabled: bool = False
    history: list = field(default_factory=list)  # (start_step, ActionChunk)

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("decay m must be >= 0")

    def add(self, start: int, chunk: ActionChunk) -> None:
        self.history.append((start, chunk))

    def action(self, t: int) -> JointConfig:
        preds = [c.actions[t - s] for s, c in self.history if 0 <= t - s < c.K]
        self.history = [(s, c) for s, c in self.history if t - s < c.K]
        if not preds:
            raise ValueError(f"no prediction covers step {t}")
        return temporal_ensemble(preds, self.m) if self.enabled else preds[-1]


# --- execution -----------------------------------------------------------


@dataclass(frozen=True)
class StepLog:
    commanded: np.ndarray
    achieved: np.ndarray
    error: float  # max |commanded - achieved|, rad


def execute(
    world,
    chunk: ActionChunk,
    H: int,
    sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    step_fn: Callable | None = None,
    ensemble: EnsembleConfig | None = None,
    start_step: int = 0,
    stop: Callable | None = None,
):
    """Run the first H actions of ``chunk``.

    Actuation noise (std ``sigma`` rad per joint per step) is added to each
    command. Absolute commands stay anchored to the chunk; delta commands
    integrate onto the previous noisy command, so errors random-walk.
    Returns the new world and the per-step log. ``stop(world)`` may end the
    run early.
    """
    if not 1 <= H <= chunk.K:
        raise ValueError(f"need 1 <= H <= K, got H={H}, K={chunk.K}")
    if step_fn is None:
        from .simworld import step as step_fn
    if sigma > 0 and rng is None:
        raise ValueError("noise needs an rng")
    arm = world.arm
    if ensemble is not None:
        ensemble.add(start_step, chunk)
    log: list[StepLog] = []
    cmd_q = world.config.q.copy()
    for k in range(H):
        if chunk.mode == "delta":
            cmd_q = cmd_q + chunk.deltas[k]
            gripper = chunk.actions[k].gripper
        else:
            a = ensemble.action(start_step + k) if ensemble is not None else chunk.actions[k]
            cmd_q, gripper = a.q.copy(), a.gripper
        if sigma > 0:
            cmd_q = cmd_q + rng.normal(0.0, sigma, kin.N_JOINTS)
        cmd_q = arm.clamp(cmd_q)
        world = step_fn(world, JointConfig(cmd_q, gripper))
        log.append(StepLog(cmd_q.copy(), world.config.q.copy(), float(np.max(np.abs(cmd_q - world.config.q)))))
        if stop is not None and stop(world):
            break
    return world, log


def terminal_error(world, target: JointConfig) -> float:
    return float(np.max(np.abs(world.config.q - target.q)))
