"""Joint risk arithmetic and agent ranking."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskscene.core import BoundingBox
from riskscene.fusion import FusionError, joint_risk, rank_agents
from riskscene.intervene import InterventionResult


def _result(scores: dict) -> InterventionResult:
    chosen = max(sorted(scores), key=lambda k: scores[k])
    return InterventionResult(
        continue_confidence=dict(scores),
        chosen_track_id=chosen,
        chosen_box=BoundingBox(0, 0, 1, 1),
        baseline_response=(0.3, 0.7),
    )


class TestJointRisk:
    def test_substitutions(self):
        assert joint_risk(1.0, 1.0) == pytest.approx(0.5, abs=1e-15)
        assert joint_risk(1.0, 0.0) == pytest.approx(1.0, abs=1e-15)
        assert joint_risk(0.6, 0.3) == pytest.approx(0.65, abs=1e-15)

    def test_out_of_range_rejected(self):
        with pytest.raises(FusionError):
            joint_risk(1.2, 0.5)
        with pytest.raises(FusionError):
            joint_risk(0.5, -0.1)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_bounded(self, s_roi, s_look):
        assert 0.0 <= joint_risk(s_roi, s_look) <= 1.0

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, s_roi, s_look, delta):
        base = joint_risk(s_roi, s_look)
        assert joint_risk(min(1.0, s_roi + delta), s_look) >= base - 1e-15
        assert joint_risk(s_roi, min(1.0, s_look + delta)) <= base + 1e-15


class TestRankAgents:
    def test_attentive_pedestrian_ranks_lower(self):
        result = _result({1: 0.8, 2: 0.8})
        ranking = rank_agents(result, {1: 0.9, 2: 0.1})
        assert [e.track_id for e in ranking] == [2, 1]
        assert ranking[0].s_risk > ranking[1].s_risk

    def test_neutral_attention_preserves_roi_order(self):
        scores = {1: 0.4, 2: 0.9, 3: 0.6}
        ranking = rank_agents(_result(scores), {k: 0.5 for k in scores})
        assert [e.track_id for e in ranking] == [2, 3, 1]

    def test_three_agent_hand_table(self):
        scores = {1: 0.7, 2: 0.5, 3: 0.9}
        looks = {1: 0.2, 2: 0.9, 3: 0.5}
        ranking = rank_agents(_result(scores), looks)
        expected = {
            1: (0.7 + 0.8) / 2,  # 0.75
            2: (0.5 + 0.1) / 2,  # 0.30
            3: (0.9 + 0.5) / 2,  # 0.70
        }
        assert [e.track_id for e in ranking] == [1, 3, 2]
        for entry in ranking:
            assert entry.s_risk == pytest.approx(expected[entry.track_id], abs=1e-15)

    def test_tie_breaks_to_lowest_id(self):
        ranking = rank_agents(_result({5: 0.5, 2: 0.5}), {5: 0.5, 2: 0.5})
        assert [e.track_id for e in ranking] == [2, 5]

    def test_id_mismatch_rejected(self):
        with pytest.raises(FusionError, match="track sets differ"):
            rank_agents(_result({1: 0.5}), {2: 0.5})

    def test_neutral_attention_preserves_argmax_randomized(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            ids = rng.choice(100, size=rng.integers(2, 8), replace=False)
            scores = {int(i): float(rng.random()) for i in ids}
            ranking = rank_agents(_result(scores), {k: 0.5 for k in scores})
            best_roi = min(sorted(scores), key=lambda k: (-scores[k], k))
            assert ranking[0].track_id == best_roi
