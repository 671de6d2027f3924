import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointcanvas import control
from jointcanvas import kinematics as kin
from jointcanvas import simworld as sw
from jointcanvas.errors import IkChainFailure

from oracles import ensemble_oracle


def cfg(arm, delta, gripper=kin.OPEN):
    return kin.JointConfig(arm.clamp(arm.home.copy() + np.asarray(delta, float)), gripper)


class TestChunk:
    @pytest.mark.parametrize("mode", ["absolute", "delta", "end_effector"])
    def test_ends_at_target(self, arm, mode):
        a, b = cfg(arm, np.zeros(7)), cfg(arm, [0.2, 0.1, -0.1, 0.2, 0.1, -0.2, 0.3])
        ch = control.make_chunk(a, b, 10, mode, arm)
        assert ch.K == 10 and ch.as_array().shape == (10, 8)
        if mode == "end_effector":
            # redundant arm: the pose is matched, the null-space posture may differ
            Ta, Tb = kin.forward_kinematics(arm, ch.actions[-1]).ee, kin.forward_kinematics(arm, b).ee
            assert np.max(np.abs(Ta - Tb)) < 2e-3  # 1e-4 m on a 0.1 m lever
        else:
            assert np.max(np.abs(ch.actions[-1].q - b.q)) < 1e-12

    def test_absolute_is_linear(self, arm):
        a, b = cfg(arm, np.zeros(7)), cfg(arm, np.full(7, 0.2))
        ch = control.make_chunk(a, b, 4, "absolute")
        assert np.allclose(ch.actions[1].q, a.q + 0.5 * (b.q - a.q))

    def test_delta_sums_to_target(self, arm):
        a, b = cfg(arm, np.zeros(7)), cfg(arm, np.full(7, 0.2))
        ch = control.make_chunk(a, b, 7, "delta")
        assert np.allclose(a.q + ch.deltas.sum(axis=0), b.q, atol=1e-12)

    def test_ee_path_is_straight(self, arm):
        a, b = cfg(arm, np.zeros(7)), cfg(arm, [0.3, 0.2, 0, -0.2, 0, 0.1, 0])
        ch = control.make_chunk(a, b, 8, "ee", arm)
        p0 = kin.forward_kinematics(arm, a).ee[:3, 3]
        p1 = kin.forward_kinematics(arm, b).ee[:3, 3]
        for k, act in enumerate(ch.actions, start=1):
            p = kin.forward_kinematics(arm, act).ee[:3, 3]
            assert np.linalg.norm(p - (p0 + k / 8 * (p1 - p0))) < 1e-3

    @given(st.integers(1, 40))
    def test_gripper_switch_fraction(self, K):
        a = kin.JointConfig(np.zeros(7), kin.OPEN)
        b = kin.JointConfig(np.zeros(7), kin.CLOSED)
        ch = control.make_chunk(a, b, K, "absolute")
        for k, act in enumerate(ch.actions, start=1):
            assert act.gripper == (kin.CLOSED if k / K >= 0.5 else kin.OPEN)

    def test_ee_unreachable(self, arm):
        # the straight EE line to a pose behind the base passes the singular axis
        a = cfg(arm, np.zeros(7))
        b = kin.JointConfig(np.array([0.0, -1.5, 0.0, -0.3, 0.0, 0.2, 0.0]))
        with pytest.raises(IkChainFailure):
            control.make_chunk(a, b, 5, "ee", arm)

    def test_bad_mode_and_K(self, arm):
        a = arm.home_config()
        with pytest.raises(ValueError):
            control.make_chunk(a, a, 5, "velocity")
        with pytest.raises(ValueError):
            control.make_chunk(a, a, 0)
        with pytest.raises(ValueError):
            control.make_chunk(a, a, 5, "end_effector")


class TestEnsemble:
    def test_zero_decay_is_mean(self):
        rng = np.random.default_rng(0)
        hist = [kin.JointConfig(rng.normal(size=7)) for _ in range(6)]
        got = control.temporal_ensemble(hist, 0.0).q
        assert np.max(np.abs(got - np.mean([h.q for h in hist], axis=0))) < 1e-12

    @given(st.integers(2, 30), st.floats(1e-3, 2.0))
    def test_weights_strictly_decreasing(self, n, m):
        w = control.ensemble_weights(n, m)
        assert np.all(np.diff(w) < 0) and math.isclose(w.sum(), 1.0)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        vals = [rng.normal(size=7) for _ in range(9)]
        got = control.temporal_ensemble([kin.JointConfig(v) for v in vals], 0.1).q
        assert np.max(np.abs(got - ensemble_oracle(vals, 0.1))) < 1e-9

    def test_negative_decay(self):
        with pytest.raises(ValueError):
            control.ensemble_weights(3, -0.1)

    def test_overlapping_chunks(self, arm):
        a, b = cfg(arm, np.zeros(7)), cfg(arm, np.full(7, 0.1))
        ens = control.EnsembleConfig(0.0, True)
        ens.add(0, control.make_chunk(a, b, 4))
        ens.add(2, control.make_chunk(a, a, 4))
        # step 3 is covered by action 3 of chunk 0 and action 1 of chunk 1
        got = ens.action(3).q
        assert np.allclose(got, 0.5 * (b.q + a.q))


class TestExecute:
    def test_runs_H_steps(self, arm):
        w = sw.reset("reach_target", 0)
        tgt = cfg(arm, np.full(7, 0.1))
        ch = control.make_chunk(w.config, tgt, 10)
        w2, log = control.execute(w, ch, 6)
        assert len(log) == 6 and w2.t == 6

    def test_full_chunk_reaches_target(self, arm):
        w = sw.reset("reach_target", 0)
        tgt = cfg(arm, np.full(7, 0.1))
        for mode in ("absolute", "delta"):
            w2, _ = control.execute(w, control.make_chunk(w.config, tgt, 10, mode), 10)
            assert control.terminal_error(w2, tgt) < 1e-9

    def test_noise_needs_rng(self, arm):
        w = sw.reset("reach_target", 0)
        with pytest.raises(ValueError):
            control.execute(w, control.make_chunk(w.config, w.config, 5), 5, sigma=0.01)

    def test_horizon_bounds(self, arm):
        w = sw.reset("reach_target", 0)
        with pytest.raises(ValueError):
            control.execute(w, control.make_chunk(w.config, w.config, 5), 6)

    def test_delta_noise_accumulates(self, arm):
        # absolute commands forget past noise; delta commands integrate it
        w = sw.reset("reach_target", 0)
        tgt = w.config
        errs = {}
        for mode in ("absolute", "delta"):
            e = []
            for s in range(30):
                w2, _ = control.execute(w, control.make_chunk(w.config, tgt, 20, mode), 20, 0.01, np.random.default_rng(s))
                e.append(np.std(w2.config.q - tgt.q))
            errs[mode] = np.mean(e)
        assert errs["delta"] > 3 * errs["absolute"]

    def test_stop_ends_early(self):
        w = sw.reset("reach_target", 0)
        ch = control.make_chunk(w.config, w.config, 10)
        _, log = control.execute(w, ch, 10, stop=lambda world: world.t >= 3)
        assert len(log) == 3
