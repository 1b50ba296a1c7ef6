import math

import numpy as np
import pytest

from ucddp import engine as E
from ucddp.clustering import ClusterAssignment
from ucddp.data import ImageDataset, synth_blobs
from ucddp.ddp import WorldConfig, checksum
from ucddp.errors import ConfigurationError, ValidationError
from ucddp.models import FeatureHeadClassifier, PerturbationModel
from ucddp.pipeline import (
    UCConfig,
    build_clusters,
    load_uc_config,
    poison_dataset,
    train_uc,
    uc_objective,
)

EPS = 8 / 255


def _small(**kw):
    base = dict(k=2, rounds=3, surrogate_steps=20, generator_steps=20, world=WorldConfig(2, 8))
    base.update(kw)
    return UCConfig(**base)


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(40, 2, dims=(1, 8, 8), seed=0)


@pytest.fixture(scope="module")
def trained(blobs):
    cfg = _small(k=4)
    clusters = build_clusters(blobs, cfg)
    return cfg, clusters, train_uc(blobs, clusters, cfg)


class _Uniform(FeatureHeadClassifier):
    """Surrogate whose logits are all zero."""

    def forward(self, x, params=None):
        feat, logits = super().forward(x, params)
        return feat, E.mul(logits, 0.0)


class TestObjective:
    def _inputs(self, k=8, n=6):
        x = np.random.default_rng(0).random((n, 1, 8, 8))
        return x, np.arange(n) % k, np.roll(np.arange(k), 1)

    def test_uniform_logits_give_log_k(self):
        x, c, pi = self._inputs()
        s = _Uniform((1, 8, 8), 8)
        g = PerturbationModel(8, (1, 8, 8), EPS)
        assert uc_objective(s, g, x, c, pi).item() == pytest.approx(math.log(8), abs=1e-6)

    def test_concentrated_logits(self):
        # logit a on the target and 0 elsewhere: p = e^a / (e^a + k - 1)
        k, a = 4, 3.0
        x, c, pi = self._inputs(k, 4)
        s = FeatureHeadClassifier((1, 8, 8), k)
        s.params = {n: np.zeros_like(v) for n, v in s.params.items()}
        g = PerturbationModel(k, (1, 8, 8), EPS)
        targets = pi[c]
        per_sample = []
        for i in range(4):
            s.params["head.b"] = np.zeros(k, np.float32)
            s.params["head.b"][targets[i]] = a
            per_sample.append(uc_objective(s, g, x[i : i + 1], c[i : i + 1], pi).item())
        p = math.exp(a) / (math.exp(a) + k - 1)
        np.testing.assert_allclose(per_sample, -math.log(p), atol=1e-6)

    def test_alignment_zero_at_centroid(self):
        x, c, pi = self._inputs(2, 2)
        s = _Uniform((1, 8, 8), 2, seed=1)
        g = PerturbationModel(2, (1, 8, 8), EPS, seed=1)
        g.params = {n: np.zeros_like(v) for n, v in g.params.items()}
        feats = s.features(x.astype(np.float32))
        centroids = np.zeros((2, feats.shape[1]), np.float32)
        centroids[pi[c]] = feats
        full = uc_objective(s, g, x, c, pi, lam=1.0, centroid_feats=centroids).item()
        assert full == pytest.approx(math.log(2), abs=1e-6)

    def test_alignment_needs_centroids(self):
        x, c, pi = self._inputs(2, 2)
        with pytest.raises(ConfigurationError):
            uc_objective(FeatureHeadClassifier((1, 8, 8), 2), PerturbationModel(2, (1, 8, 8)), x, c, pi, lam=0.5)

    def test_empty_batch(self):
        with pytest.raises(ValidationError):
            uc_objective(FeatureHeadClassifier((1, 8, 8), 2), PerturbationModel(2, (1, 8, 8)), np.zeros((0, 1, 8, 8)), [], [1, 0])


class TestClusters:
    def test_recovers_blob_partition(self):
        ds = synth_blobs(30, 3, dims=(1, 8, 8), sigma=1e-4, seed=2)
        cl = build_clusters(ds, UCConfig(k=3))
        # the partition equals the class partition up to relabelling
        pairs = set(zip(cl.assign.tolist(), ds.labels.tolist()))
        assert len(pairs) == 3

    def test_k1_rejected(self, blobs):
        with pytest.raises(ValidationError):
            build_clusters(blobs, _k1())

    def test_never_reads_labels(self, blobs):
        cfg = UCConfig(k=4)
        a = build_clusters(blobs, cfg)
        b = build_clusters(blobs.without_labels(), cfg)
        assert a.to_dict() == b.to_dict()


def _k1():
    # UCConfig itself refuses k=1, so bypass it to reach the clustering check
    cfg = UCConfig(k=2)
    cfg.k = 1
    return cfg


class TestConfig:
    def test_defaults(self):
        cfg = UCConfig.from_dict({})
        assert (cfg.k, cfg.rounds, cfg.surrogate_steps, cfg.generator_steps, cfg.lam) == (8, 10, 50, 50, 0.0)
        assert cfg.epsilon == pytest.approx(EPS)

    def test_nested_and_unknown(self):
        cfg = UCConfig.from_dict({"k": 3, "world": {"world_size": 2, "per_worker_batch": 4}, "optim": {"lr_max": 0.01}})
        assert cfg.world.global_batch == 8 and cfg.optim.lr_max == 0.01
        with pytest.raises(ConfigurationError):
            UCConfig.from_dict({"kk": 3})

    @pytest.mark.parametrize("bad", [{"rounds": 0}, {"lam": -1}, {"epsilon": 0}, {"epsilon": 1.5}, {"k": 1}])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            UCConfig.from_dict(bad)

    def test_load_from_file(self, tmp_path):
        (tmp_path / "c.json").write_text('{"uc": {"k": 5, "rounds": 2}}')
        cfg = load_uc_config(tmp_path / "c.json")
        assert cfg.k == 5 and cfg.rounds == 2


class TestTrainUC:
    def test_history_and_accuracy(self, trained):
        cfg, _, art = trained
        assert len(art.history) == cfg.rounds
        assert len(art.step_losses["surrogate"]) == cfg.rounds * cfg.surrogate_steps
        assert 0.0 <= art.surrogate_accuracy <= 1.0

    @pytest.mark.slow
    def test_k2_defaults_reach_high_surrogate_accuracy(self):
        ds = synth_blobs(100, 2, seed=1)
        cfg = UCConfig(k=2)
        assert train_uc(ds, build_clusters(ds, cfg), cfg).surrogate_accuracy >= 0.9

    def test_k2_surrogate_learns_shuffled_labels(self):
        ds = synth_blobs(50, 2, seed=0)
        cfg = _small()
        art = train_uc(ds, build_clusters(ds, cfg), cfg)
        assert art.surrogate_accuracy >= 0.9

    def test_deterministic(self, blobs, trained):
        cfg, clusters, art = trained
        again = train_uc(blobs, clusters, cfg)
        assert checksum(again.generator.param_list()) == checksum(art.generator.param_list())
        assert checksum(again.surrogate.param_list()) == checksum(art.surrogate.param_list())
        assert again.history == art.history

    def test_label_agnostic(self, blobs, trained):
        cfg, _, art = trained
        unl = blobs.without_labels()
        other = train_uc(unl, build_clusters(unl, cfg), cfg)
        assert other.clusters.to_dict() == art.clusters.to_dict()
        assert checksum(other.generator.param_list()) == checksum(art.generator.param_list())
        assert checksum(other.surrogate.param_list()) == checksum(art.surrogate.param_list())

    def test_surrogate_loss_trend(self, trained):
        hist = [h["surrogate_loss"] for h in trained[2].history]
        assert all(b <= a + 0.05 for a, b in zip(hist, hist[1:]))

    def test_mismatched_clusters(self, blobs):
        cl = build_clusters(synth_blobs(10, 2, dims=(1, 8, 8)), _small())
        with pytest.raises(ConfigurationError):
            train_uc(blobs, cl, _small())

    def test_feature_alignment_runs(self, blobs):
        cfg = _small(k=2, rounds=2, surrogate_steps=5, generator_steps=5, lam=0.1)
        art = train_uc(blobs, build_clusters(blobs, cfg), cfg)
        assert all(math.isfinite(h["surrogate_loss"]) for h in art.history)

    def test_vanishing_budget_gives_generator_no_leverage(self):
        ds = synth_blobs(100, 2, dims=(1, 8, 8), margin=0.02, sigma=0.2, seed=0)
        runs = {}
        for eps in (1e-6, EPS):
            cfg = UCConfig(k=8, epsilon=eps, rounds=5, surrogate_steps=40, generator_steps=40, world=WorldConfig(2, 8))
            runs[eps] = [h["generator_loss"] for h in train_uc(ds, build_clusters(ds, cfg), cfg).history]
        assert all(b <= a + 0.01 for a, b in zip(runs[1e-6], runs[EPS]))
        assert runs[EPS][-1] < runs[1e-6][-1] - 0.02

    def test_save_layout(self, trained, tmp_path):
        paths = trained[2].save(tmp_path)
        assert {p.name for p in paths.values()} == {"clusters.json", "surrogate.ckpt", "generator.ckpt", "history.csv"}
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == "round,phase,mean_loss"
        assert len(lines) == 1 + 2 * trained[0].rounds


class TestPoison:
    def test_budget_and_labels(self, blobs, trained):
        _, clusters, art = trained
        out = poison_dataset(blobs, clusters, art.generator)
        np.testing.assert_array_equal(out.labels, blobs.labels)
        diff = np.abs(out.images - blobs.images)
        unclamped = (out.images > 0) & (out.images < 1)
        assert diff[unclamped].max() <= EPS + 1e-6
        assert out.images.min() >= 0 and out.images.max() <= 1

    def test_zero_generator_is_identity(self, blobs, trained):
        _, clusters, art = trained
        g = art.generator.copy()
        g.params = {n: np.zeros_like(v) for n, v in g.params.items()}
        np.testing.assert_array_equal(poison_dataset(blobs, clusters, g).images, blobs.images)

    def test_cluster_wise_noise(self, trained):
        _, clusters, art = trained
        # pixels well inside (0, 1) so clipping cannot hide the noise
        flat = ImageDataset(np.full((60, 1, 8, 8), 0.5, np.float32))
        cl = ClusterAssignment(clusters.k, clusters.centroids, np.arange(60) % clusters.k, clusters.pi)
        deltas = poison_dataset(flat, cl, art.generator).images - 0.5
        assert len({d.tobytes() for d in deltas}) == clusters.k
        for j in range(clusters.k):
            group = deltas[cl.assign == j]
            assert (group == group[0]).all()

    def test_size_mismatch(self, blobs, trained):
        with pytest.raises(ConfigurationError):
            poison_dataset(synth_blobs(3, 2, dims=(1, 8, 8)), trained[1], trained[2].generator)
