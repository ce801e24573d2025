"""Contrastive encoder tests: loss closed forms, sampler eligibility,
gradients against finite differences, training probes via sklearn."""

import inspect
import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from obfusion import contrastive as C
from obfusion import data as D
from obfusion import nncore as nn
from obfusion.data import load_dataset
from obfusion.errors import ConfigError, NumericError, SamplingError

SYNTH_CFG = C.ContrastiveConfig(temperature=0.3, epochs=24, seed=0)


@pytest.fixture(scope="module")
def corpus():
    ds = D.standardize(D.generate_synthetic(D.SynthSpec()))
    train, test = D.split(ds, 0.8, seed=1)
    return train, test


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    train, _ = corpus
    snap_dir = tmp_path_factory.mktemp("snapshots")
    res = C.train_contrastive(train, SYNTH_CFG, snapshot_dir=snap_dir)
    return res


class TestCosineSimilarity:
    def test_self_is_one(self):
        v = np.array([0.3, -0.2, 0.9])
        assert C.cosine_similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        assert C.cosine_similarity(np.array([1.0, 0.0]),
                                   np.array([0.0, 2.0])) == pytest.approx(0.0)

    def test_opposite_is_minus_one(self):
        v = np.array([1.0, 2.0])
        assert C.cosine_similarity(v, -3.0 * v) == pytest.approx(-1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(NumericError):
            C.cosine_similarity(np.zeros(3), np.ones(3))


class TestInfoNce:
    def test_uniform_logits_is_log_k_plus_1(self):
        v = np.array([1.0, 1.0])
        for k in (1, 4, 16):
            loss = C.info_nce_loss(v, v, np.tile(v, (k, 1)), 0.3)
            assert loss == pytest.approx(math.log(k + 1), rel=1e-12)

    def test_hand_evaluated_two_candidate_case(self):
        z = np.array([1.0, 0.0])
        pos = np.array([1.0, 0.0])
        negs = np.array([[0.0, 1.0]])
        loss = C.info_nce_loss(z, pos, negs, 1.0)
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-12)
        assert loss == pytest.approx(0.31326, abs=1e-5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=4)
        pos = rng.normal(size=4)
        negs = rng.normal(size=(5, 4))
        a = C.info_nce_loss(z, pos, negs, 0.2)
        b = C.info_nce_loss(z, pos, negs[::-1].copy(), 0.2)
        assert a == pytest.approx(b, rel=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        Z, P = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        N = rng.normal(size=(3, 5, 4))
        l1 = C.info_nce_batch(Z, P, N, 0.2)[0]
        l2 = C.info_nce_batch(7.3 * Z, 7.3 * P, 7.3 * N, 0.2)[0]
        assert l1 == pytest.approx(l2, rel=1e-12)

    def test_nonnegative_and_near_zero_when_positive_dominates(self):
        z = np.array([1.0, 0.0])
        negs = np.tile(np.array([-1.0, 0.0]), (3, 1))
        loss = C.info_nce_loss(z, z, negs, 0.01)
        assert 0.0 <= loss < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        Z, P = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        N = rng.normal(size=(2, 4, 3))
        _, dZ, dP, dN = C.info_nce_batch(Z, P, N, 0.2)
        eps = 1e-6

        def loss_at(Zv, Pv, Nv):
            return C.info_nce_batch(Zv, Pv, Nv, 0.2)[0]

        for arr, an in ((Z, dZ), (P, dP), (N, dN)):
            for idx in np.ndindex(arr.shape):
                up, down = arr.copy(), arr.copy()
                up[idx] += eps
                down[idx] -= eps
                args_up = [up if a is arr else a for a in (Z, P, N)]
                args_dn = [down if a is arr else a for a in (Z, P, N)]
                fd = (loss_at(*args_up) - loss_at(*args_dn)) / (2 * eps)
                assert abs(fd - an[idx]) < 1e-7

    def test_zero_embedding_rejected(self):
        z = np.zeros(3)
        with pytest.raises(NumericError):
            C.info_nce_loss(z, np.ones(3), np.ones((2, 3)), 0.2)

    def test_bad_temperature_rejected(self):
        v = np.ones(3)
        with pytest.raises(ConfigError):
            C.info_nce_batch(v[None], v[None], v[None, None], 0.0)


class TestSampler:
    def test_signature_receives_only_public_labels(self):
        params = list(inspect.signature(C.sample_contrastive_batch).parameters)
        assert params == ["u_labels", "anchor", "k", "rng"]

    def test_negatives_always_differ_in_class(self):
        rng = np.random.default_rng(3)
        u = np.repeat(np.arange(4), 32)
        for _ in range(1000):
            anchor = int(rng.integers(0, u.size))
            _, pos, negs = C.sample_contrastive_batch(u, anchor, 8, rng)
            assert u[pos] == u[anchor] and pos != anchor
            assert (u[negs] != u[anchor]).all()
            assert len(set(negs.tolist())) == 8

    def test_positive_private_class_matches_marginal(self, corpus):
        # positives are chosen blind to S, so P(S+ != S_anchor) should track
        # the within-class marginal 64/127
        train, _ = corpus
        full = D.generate_synthetic(D.SynthSpec())
        u = full.labels[D.PUBLIC_ATTR]
        s = full.labels[D.PRIVATE_ATTR]
        rng = np.random.default_rng(4)
        n = 1000
        mismatches = 0
        for _ in range(n):
            anchor = int(rng.integers(0, u.size))
            _, pos, _ = C.sample_contrastive_batch(u, anchor, 4, rng)
            mismatches += int(s[pos] != s[anchor])
        p = 64 / 127
        se = math.sqrt(p * (1 - p) / n)
        assert abs(mismatches / n - p) <= 3 * se

    def test_insufficient_positives_rejected(self):
        u = np.array([0, 1, 1, 1])
        with pytest.raises(SamplingError):
            C.sample_contrastive_batch(u, 0, 1, np.random.default_rng(0))

    def test_oversized_k_rejected(self):
        u = np.array([0, 0, 1, 1])
        with pytest.raises(SamplingError):
            C.sample_contrastive_batch(u, 0, 3, np.random.default_rng(0))


class TestEncoder:
    def test_grad_check(self):
        rng = np.random.default_rng(5)
        model = C.PublicEncoder(2, 16, 4, rng, conv_channels=(4, 6),
                                fc_widths=(12, 8))
        x = rng.normal(size=(3, 2, 16)).astype(np.float32)
        assert nn.grad_check(model, [x]) < 1e-6

    def test_embedding_dim_and_determinism(self, trained, corpus):
        train, _ = corpus
        x = train.values[:5]
        z1 = C.embed_public(trained.model, x)
        z2 = C.embed_public(trained.model, x)
        assert z1.shape == (5, SYNTH_CFG.embed_dim)
        np.testing.assert_array_equal(z1, z2)


class TestTraining:
    def test_loss_beats_uniform_baseline(self, trained):
        assert trained.loss_history[-1] < math.log(SYNTH_CFG.negatives + 1)

    def test_loss_trend_decreasing(self, trained):
        h = trained.loss_history
        assert np.mean(h[-4:]) < 0.5 * np.mean(h[:4])

    def test_linear_probe_recovers_public_attribute(self, trained, corpus):
        train, test = corpus
        z_tr = C.embed_public(trained.model, train.values)
        z_te = C.embed_public(trained.model, test.values)
        probe = LogisticRegression(max_iter=2000)
        probe.fit(z_tr, train.labels[D.PUBLIC_ATTR])
        assert probe.score(z_te, test.labels[D.PUBLIC_ATTR]) >= 0.90

    def test_linear_probe_starves_private_attribute(self, trained, corpus):
        train, test = corpus
        z_tr = C.embed_public(trained.model, train.values)
        z_te = C.embed_public(trained.model, test.values)
        probe = LogisticRegression(max_iter=2000)
        probe.fit(z_tr, train.labels[D.PRIVATE_ATTR])
        assert probe.score(z_te, test.labels[D.PRIVATE_ATTR]) <= 0.60

    def test_same_class_pairs_more_similar(self, trained, corpus):
        _, test = corpus
        z = C.embed_public(trained.model, test.values)
        zu = z / np.linalg.norm(z, axis=1, keepdims=True)
        sims = zu @ zu.T
        u = test.labels[D.PUBLIC_ATTR]
        same = (u[:, None] == u[None, :]) & ~np.eye(len(u), dtype=bool)
        diff = u[:, None] != u[None, :]
        assert sims[same].mean() > sims[diff].mean() + 0.2

    def test_snapshots_written_per_epoch(self, trained, corpus):
        train, _ = corpus
        assert len(trained.snapshot_paths) == SYNTH_CFG.epochs + 1
        snap = load_dataset(trained.snapshot_paths[-1])
        assert snap.values.shape == (len(train), SYNTH_CFG.embed_dim, 1)
        np.testing.assert_array_equal(snap.labels[D.PUBLIC_ATTR],
                                      train.labels[D.PUBLIC_ATTR])
        np.testing.assert_array_equal(
            snap.values[:, :, 0],
            C.embed_public(trained.model, train.values))

    def test_single_class_rejected(self, corpus):
        train, _ = corpus
        mask = train.labels[D.PUBLIC_ATTR] == 2
        sub = train.subset(np.flatnonzero(mask))
        with pytest.raises(ConfigError):
            C.train_contrastive(sub, SYNTH_CFG)

    def test_checkpoint_roundtrip(self, trained, corpus, tmp_path):
        train, _ = corpus
        path = tmp_path / "phi.ckpt"
        C.save_contrastive(path, trained.model)
        back = C.load_contrastive(path)
        x = train.values[:4]
        np.testing.assert_array_equal(C.embed_public(back, x),
                                      C.embed_public(trained.model, x))
