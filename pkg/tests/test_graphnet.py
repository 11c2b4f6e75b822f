"""Interaction graph: adjacency normalization, GCN propagation, gradients."""

import math

import numpy as np
import pytest
import torch

from conftest import check_gradients, generic_point, softmax_oracle
from riskscene.core import AgentClass, AgentNode, BoundingBox, Frame
from riskscene.graphnet import (
    GraphConfigError,
    GraphNet,
    adjacency_tensor,
    appearance_relation,
    build_adjacency,
    episode_tensors,
    gcn_forward,
    presence_gate,
    relational_features,
)
from riskscene.intervene import RiskModel, init_parameters, response_loss


def _node(track_id, feature, present=True, cls=AgentClass.CAR):
    return AgentNode(track_id, cls, BoundingBox(0, 0, 1, 1), np.asarray(feature, float), present)


def _frame(features, present):
    nodes = [_node(0, features[0], present[0], AgentClass.EGO)]
    nodes += [_node(i, features[i], present[i]) for i in range(1, len(features))]
    return Frame(index=1, nodes=tuple(nodes))


def _random_graph(d, layers=2, seed=0):
    net = GraphNet(d, layers)
    gen = torch.Generator().manual_seed(seed)
    for p in net.parameters():
        with torch.no_grad():
            p.uniform_(-0.5, 0.5, generator=gen)
    return net


class TestAppearanceRelation:
    def test_zero_features(self):
        net = _random_graph(4)
        assert appearance_relation(np.zeros(4), np.zeros(4), net) == 0.0

    def test_scalar_case(self):
        net = GraphNet(1, 1)
        with torch.no_grad():
            net.w.fill_(2.0)
            net.w_prime.fill_(3.0)
        assert appearance_relation([1.0], [1.0], net) == pytest.approx(6.0, abs=1e-12)

    def test_bilinearity_in_first_argument(self):
        net = _random_graph(5, seed=3)
        m_i = np.linspace(0.1, 0.5, 5)
        m_j = np.linspace(-0.2, 0.3, 5)
        base = appearance_relation(m_i, m_j, net)
        assert appearance_relation(2.5 * m_i, m_j, net) == pytest.approx(2.5 * base, rel=1e-12)

    def test_non_finite_rejected(self):
        net = _random_graph(3)
        with pytest.raises(GraphConfigError, match="non-finite"):
            appearance_relation([np.inf, 0, 0], np.zeros(3), net)


class TestPresenceGate:
    def test_cases(self):
        a = _node(1, [1.0], True)
        b = _node(2, [1.0], True)
        c = _node(3, [0.0], False)
        assert presence_gate(a, b) == 1
        assert presence_gate(a, c) == 0
        assert presence_gate(c, c) == 0


class TestBuildAdjacency:
    def test_constant_relation_gives_uniform_rows(self):
        # Identical features make every f_a equal, so present rows are uniform.
        net = _random_graph(4, seed=1)
        frame = _frame([np.ones(4)] * 3, [True, True, True])
        a = build_adjacency(frame, net).a
        assert np.allclose(a, np.full((3, 3), 1.0 / 3.0), atol=1e-12)

    def test_absent_column_zero_and_rows_renormalize(self):
        net = _random_graph(4, seed=2)
        frame = _frame([np.ones(4), np.ones(4), np.zeros(4)], [True, True, False])
        a = build_adjacency(frame, net).a
        assert np.all(a[:, 2] == 0.0) and np.all(a[2, :] == 0.0)
        assert np.allclose(a[:2].sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(a[:2, :2], 0.5, atol=1e-12)

    def test_scalar_two_agent_softmax_oracle(self):
        net = GraphNet(1, 1)
        with torch.no_grad():
            net.w.fill_(1.5)
            net.w_prime.fill_(-0.7)
        m = [2.0, -1.0]
        frame = _frame([[m[0]], [m[1]]], [True, True])
        a = build_adjacency(frame, net).a
        for i in range(2):
            logits = [1.5 * m[i] * -0.7 * m[j] / math.sqrt(1) for j in range(2)]
            assert np.allclose(a[i], softmax_oracle(logits), atol=1e-12)

    def test_row_stochasticity_random_frames(self):
        rng = np.random.default_rng(5)
        for trial in range(40):
            d = int(rng.integers(2, 9))
            n = int(rng.integers(2, 12))
            net = _random_graph(d, seed=trial)
            present = [True] + [bool(rng.random() < 0.7) for _ in range(n - 1)]
            feats = [rng.normal(size=d) if p else np.zeros(d) for p in present]
            a = build_adjacency(_frame(feats, present), net).a
            for i, p in enumerate(present):
                if p:
                    assert abs(a[i].sum() - 1.0) < 1e-6
                else:
                    assert np.all(a[i] == 0.0) and np.all(a[:, i] == 0.0)
            assert a.min() >= 0.0 and a.max() <= 1.0


class TestGcnForward:
    def test_single_present_node_identity_propagation(self):
        net = GraphNet(3, 1)
        with torch.no_grad():
            net.layer_weights[0].copy_(torch.eye(3, dtype=torch.float64))
        feat = np.array([0.5, -2.0, 1.0])
        frame = _frame([feat], [True])
        feats, present = episode_tensors(
            _episode_of_frames([frame])
        )
        adj = adjacency_tensor(feats, present, net)
        g = gcn_forward(feats, present, adj, net).detach()
        assert np.allclose(g.numpy(), np.maximum(feat, 0.0), atol=1e-12)

    def test_zero_features_zero_bias_give_zero(self):
        net = _random_graph(4, seed=7)
        with torch.no_grad():
            for b in net.layer_biases:
                b.zero_()
        frame = _frame([np.zeros(4)] * 3, [True, True, True])
        feats, present = episode_tensors(_episode_of_frames([frame]))
        g = relational_features(feats, present, net).detach()
        assert np.allclose(g.numpy(), 0.0, atol=1e-12)

    def test_two_node_scalar_chain_oracle(self):
        net = GraphNet(1, 1)
        w, wp, gw, gb = 0.8, -1.2, 1.7, 0.3
        with torch.no_grad():
            net.w.fill_(w)
            net.w_prime.fill_(wp)
            net.layer_weights[0].fill_(gw)
            net.layer_biases[0].fill_(gb)
        m = np.array([1.2, -0.4])
        frame = _frame([[m[0]], [m[1]]], [True, True])
        feats, present = episode_tensors(_episode_of_frames([frame]))
        g = relational_features(feats, present, net).detach().numpy()

        a = np.zeros((2, 2))
        for i in range(2):
            logits = [w * m[i] * wp * m[j] for j in range(2)]
            a[i] = softmax_oracle(logits)
        h = np.maximum(a @ m * gw + gb, 0.0)
        assert g[0] == pytest.approx(h.mean(), abs=1e-12)

    def test_permutation_equivariance(self, small_episodes):
        net = _random_graph(48, seed=11)
        episode = small_episodes[0]
        feats, present = episode_tensors(episode)
        g0 = relational_features(feats, present, net).detach().numpy()
        rng = np.random.default_rng(0)
        perm = np.concatenate([[0], 1 + rng.permutation(feats.shape[1] - 1)])
        g1 = relational_features(feats[:, perm], present[:, perm], net).detach().numpy()
        assert np.allclose(g0, g1, atol=1e-6)

    def test_masked_node_feature_nullity(self, small_episodes):
        net = _random_graph(48, seed=13)
        episode = small_episodes[1]
        feats, present = episode_tensors(episode)
        g0 = relational_features(feats, present, net).detach().numpy()
        dirty = feats.clone()
        absent = present == 0
        dirty[absent] = 123.456  # garbage in every absent slot
        g1 = relational_features(dirty, present, net).detach().numpy()
        assert np.max(np.abs(g0 - g1)) < 1e-9

    def test_layer_shape_mismatch_raises(self):
        net = _random_graph(4)
        feats = torch.zeros(1, 2, 3, 5, dtype=torch.float64)
        present = torch.ones(1, 2, 3, dtype=torch.float64)
        with pytest.raises(GraphConfigError):
            relational_features(feats, present, net)


def _episode_of_frames(frames):
    from riskscene.core import DriverAction, DriverResponse, Episode, RiskSituation

    return Episode(
        frames=tuple(frames),
        response=DriverResponse.CONTINUE,
        actions=tuple([DriverAction.GO_STRAIGHT] * len(frames)),
        situation=RiskSituation.CUT_IN,
    )


class TestGradients:
    def test_gcn_response_gradients_match_finite_differences(self):
        rng = np.random.default_rng(21)
        for trial in range(6):
            d = int(rng.integers(2, 9))
            n = int(rng.integers(2, 5))
            z = int(rng.integers(1, 3))
            model = RiskModel(d=d, hidden=3, gcn_layers=2, p_d=1, use_action_branch=False)
            init_parameters(model, seed=trial)
            generic_point(model, seed=trial + 1)
            present = torch.tensor(
                [[[1.0] + [float(rng.random() < 0.8) for _ in range(n - 1)] for _ in range(z)]],
                dtype=torch.float64,
            )
            feats = torch.tensor(rng.normal(size=(1, z, n, d)), dtype=torch.float64) * present.unsqueeze(-1)
            label = torch.tensor([int(rng.integers(2))])

            def loss_fn():
                logits, _ = model.forward_batch(feats, present)
                return response_loss(torch.softmax(logits, dim=-1), label)

            params = [p for name, p in model.named_parameters() if not name.startswith("attention.")]
            check_gradients(loss_fn, params + [feats], tol=1e-3)

    def test_gradient_flows_to_input_features(self):
        model = RiskModel(d=3, hidden=2, gcn_layers=1, p_d=1, use_action_branch=False)
        init_parameters(model, seed=5)
        generic_point(model, seed=6)
        feats = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        present = torch.ones(1, 2, 3, dtype=torch.float64)

        def loss_fn():
            logits, _ = model.forward_batch(feats, present)
            return response_loss(torch.softmax(logits, dim=-1), torch.tensor([1]))

        check_gradients(loss_fn, [feats], tol=1e-3)
