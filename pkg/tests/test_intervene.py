"""Intervention engine: masking semantics, response prediction, risk selection."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from conftest import lstm_cell_oracle, softmax_oracle
from riskscene.core import (
    AgentClass,
    AgentNode,
    BoundingBox,
    DriverAction,
    DriverResponse,
    Episode,
    Frame,
    RiskSituation,
)
from riskscene.intervene import (
    DegenerateSceneError,
    MaskError,
    RiskModel,
    identify_risk_object,
    init_parameters,
    mask_agent,
    predict_response,
    response_logits,
    response_loss,
)
from riskscene.graphnet import build_adjacency
from riskscene.synthgen import build_world, corridor_response, world_to_episode


def _episode(features, present, d, n_frames=1, classes=None):
    """Build a tiny episode; slot 0 is ego, remaining slots use the given data."""
    n = len(features)
    classes = classes or [AgentClass.CAR] * n
    frames = []
    for t in range(1, n_frames + 1):
        nodes = [
            AgentNode(0, AgentClass.EGO, BoundingBox(0, 0, 100, 100), np.asarray(features[0], float), bool(present[0]))
        ]
        for i in range(1, n):
            nodes.append(
                AgentNode(
                    i, classes[i], BoundingBox(i * 10, 0, i * 10 + 5, 5),
                    np.asarray(features[i], float), bool(present[i]),
                )
            )
        frames.append(Frame(index=t, nodes=tuple(nodes)))
    return Episode(
        frames=tuple(frames),
        response=DriverResponse.ALTER,
        actions=tuple([DriverAction.GO_STRAIGHT] * n_frames),
        situation=RiskSituation.CUT_IN,
    )


def _model(d, hidden=3, layers=1, p_d=1, action=True, seed=0):
    model = RiskModel(d=d, hidden=hidden, gcn_layers=layers, p_d=p_d, use_action_branch=action)
    init_parameters(model, seed)
    return model


class TestMaskAgent:
    def test_masking_absent_track_changes_nothing(self, small_episodes):
        episode = small_episodes[0]
        model = _model(episode.feature_dim, seed=2)
        padding_id = episode.frames[0].nodes[-1].track_id
        assert all(not f.nodes[-1].present for f in episode.frames)
        before = response_logits(episode, model)
        after = response_logits(mask_agent(episode, padding_id), model)
        assert np.max(np.abs(before - after)) < 1e-9

    def test_masking_only_agent_leaves_ego_self_row(self):
        d = 3
        episode = _episode([np.ones(d), np.full(d, 2.0)], [True, True], d)
        model = _model(d)
        masked = mask_agent(episode, 1)
        a = build_adjacency(masked.frames[0], model.graph).a
        assert a[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert np.all(a[1:, :] == 0.0) and np.all(a[:, 1:] == 0.0)

    def test_mask_causal_agent_restores_continue_world(self, small_world):
        for i in range(60):
            world = build_world(small_world, i)
            if world.response is not DriverResponse.ALTER:
                continue
            remaining = tuple(a for a in world.agents if a.track_id != world.causal_track_id)
            residual = dataclasses.replace(world, agents=remaining)
            assert corridor_response(residual) is DriverResponse.CONTINUE
            # The episode-level mask mirrors the kinematic removal.
            episode = world_to_episode(world, small_world)
            masked = mask_agent(episode, world.causal_track_id)
            for frame in masked.frames:
                node = next(n for n in frame.nodes if n.track_id == world.causal_track_id)
                assert not node.present and not node.feature.any()

    def test_mask_ego_rejected(self, small_episodes):
        with pytest.raises(MaskError, match="ego"):
            mask_agent(small_episodes[0], 0)

    def test_mask_unknown_track_rejected(self, small_episodes):
        with pytest.raises(MaskError, match="does not exist"):
            mask_agent(small_episodes[0], 12345)

    def test_presence_bookkeeping(self, small_episodes):
        episode = small_episodes[4]
        target = next(
            n.track_id for n in episode.final_frame().nodes
            if n.present and n.agent_class is not AgentClass.EGO
        )
        frames_present = sum(
            1 for f in episode.frames for n in f.nodes if n.track_id == target and n.present
        )
        before = sum(1 for f in episode.frames for n in f.nodes if n.present)
        after_episode = mask_agent(episode, target)
        after = sum(1 for f in after_episode.frames for n in f.nodes if n.present)
        assert before - after == frames_present


class TestPredictResponse:
    def test_zero_parameters_give_half_half(self, small_episodes):
        episode = small_episodes[0]
        model = RiskModel(d=episode.feature_dim, hidden=4, gcn_layers=2, p_d=2)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        p_cont, p_alt = predict_response(episode, model)
        assert p_cont == pytest.approx(0.5, abs=1e-12)
        assert p_alt == pytest.approx(0.5, abs=1e-12)

    def test_probabilities_sum_to_one(self, small_episodes):
        model = _model(small_episodes[0].feature_dim, seed=7)
        for episode in small_episodes[:5]:
            p_cont, p_alt = predict_response(episode, model)
            assert p_cont + p_alt == pytest.approx(1.0, abs=1e-9)

    def test_scalar_end_to_end_oracle(self):
        """D=1, H=1, two agents, one frame: the full pipeline by hand."""
        d = 1
        m_ego, m_car = 0.8, -0.5
        episode = _episode([[m_ego], [m_car]], [True, True], d)
        model = _model(d, hidden=1, layers=1, p_d=1, action=True, seed=3)
        got = np.array(predict_response(episode, model))

        # Graph branch.
        w = model.graph.w.detach().item()
        wp = model.graph.w_prime.detach().item()
        gw = model.graph.layer_weights[0].detach().item()
        gb = model.graph.layer_biases[0].detach().item()
        m = np.array([m_ego, m_car])
        a = np.zeros((2, 2))
        for i in range(2):
            a[i] = softmax_oracle([w * m[i] * wp * m[j] for j in range(2)])
        g = np.maximum(a @ m * gw + gb, 0.0).mean()

        # Action branch: one encoder step on concat(x, x_hat=0).
        enc = model.action.encoder
        h, c = lstm_cell_oracle(
            np.array([m_ego, 0.0]), np.zeros(1), np.zeros(1),
            enc.weight_ih.detach().numpy(), enc.weight_hh.detach().numpy(),
            enc.bias_ih.detach().numpy(), enc.bias_hh.detach().numpy(),
        )

        head_w = model.response_head.weight.detach().numpy()
        head_b = model.response_head.bias.detach().numpy()
        logits = head_w @ np.array([g, h[0]]) + head_b
        expected = softmax_oracle(logits)
        assert np.allclose(got, expected, atol=1e-12)


class TestIdentifyRiskObject:
    def test_single_candidate_chosen(self):
        d = 4
        episode = _episode([np.ones(d), np.full(d, 0.5)], [True, True], d)
        model = _model(d, seed=1)
        result = identify_risk_object(episode, model)
        assert result.chosen_track_id == 1
        assert result.chosen_box == episode.final_frame().nodes[1].box

    def test_bit_identical_agents_tie_break_to_lowest_id(self):
        d = 4
        feature = np.linspace(0.1, 0.4, d)
        episode = _episode([np.ones(d), feature.copy(), feature.copy()], [True, True, True], d)
        model = _model(d, seed=5)
        result = identify_risk_object(episode, model)
        scores = result.continue_confidence
        assert scores[1] == scores[2]  # identical inputs, identical arithmetic
        assert result.chosen_track_id == 1

    def test_constant_logit_shift_keeps_choice(self, small_episodes):
        episode = next(e for e in small_episodes if e.response is DriverResponse.ALTER)
        model = _model(episode.feature_dim, seed=11)
        first = identify_risk_object(episode, model)
        with torch.no_grad():
            model.response_head.bias += 3.7  # shifts every candidate's logits equally
        second = identify_risk_object(episode, model)
        assert first.chosen_track_id == second.chosen_track_id

    def test_pure_function(self, small_episodes):
        episode = next(e for e in small_episodes if e.response is DriverResponse.ALTER)
        model = _model(episode.feature_dim, seed=13)
        a = identify_risk_object(episode, model)
        b = identify_risk_object(episode, model)
        assert a.continue_confidence == b.continue_confidence
        assert a.chosen_track_id == b.chosen_track_id
        assert a.baseline_response == b.baseline_response

    def test_degenerate_scene_rejected(self):
        d = 3
        episode = _episode([np.ones(d)], [True], d)
        model = _model(d)
        with pytest.raises(DegenerateSceneError, match="no candidate"):
            identify_risk_object(episode, model)

    def test_masked_candidate_score_ignores_its_features(self, small_episodes):
        """No-leak: once masked, an agent's stored features cannot move its score."""
        episode = next(e for e in small_episodes if e.response is DriverResponse.ALTER)
        model = _model(episode.feature_dim, seed=17)
        target = episode.causal_track_id
        base = identify_risk_object(episode, model).continue_confidence[target]
        poked_frames = []
        for frame in episode.frames:
            nodes = []
            for node in frame.nodes:
                if node.track_id == target:
                    nodes.append(dataclasses.replace(node, feature=node.feature + 50.0))
                else:
                    nodes.append(node)
            poked_frames.append(Frame(index=frame.index, nodes=tuple(nodes)))
        poked = dataclasses.replace(episode, frames=tuple(poked_frames))
        after = identify_risk_object(poked, model).continue_confidence[target]
        assert abs(base - after) < 1e-9


class TestResponseLoss:
    def test_perfect_predictions(self):
        preds = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert float(response_loss(preds, [0, 1])) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_predictions(self):
        preds = np.full((4, 2), 0.5)
        assert float(response_loss(preds, [0, 1, 0, 1])) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_hand_set_logits(self):
        logits = np.array([[0.4, -0.3], [1.1, 0.9]])
        probs = np.stack([softmax_oracle(l) for l in logits])
        labels = [1, 0]
        expected = np.mean([-np.log(probs[0, 1]), -np.log(probs[1, 0])])
        assert float(response_loss(probs, labels)) == pytest.approx(expected, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            response_loss(np.zeros((0, 2)), [])
