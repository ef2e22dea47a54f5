from types import SimpleNamespace

import numpy as np
import pytest

from cooc import nn, probes, rf
from cooc import tensor as T
from cooc.probes import AttackSpec
from cooc.rf import ArchConfig, BackboneOutput
from cooc.tensor import Tensor
from cooc.trainer import ProbeHead


class _GridNet:
    """Stand-in backbone that replays fixed local grids."""

    def __init__(self, grids):
        self.grids = np.asarray(grids, dtype=np.float32)
        self.lookup = {g.tobytes(): i for i, g in enumerate(self.grids)}

    def __call__(self, x, mode="eval", linearize=False):
        idx = [self.lookup[np.asarray(img, dtype=np.float32).tobytes()] for img in x.data]
        local = Tensor(self.grids[idx])
        pooled = T.global_avg_pool(local)
        return BackboneOutput(local=local, global_pooled=pooled, global_=pooled)


def _grid_nets(grids):
    return SimpleNamespace(backbone=_GridNet(grids))


def _identity_probe(classes, features):
    probe = ProbeHead(features, classes, lr=0.0)
    probe.linear.weight.data[:] = np.eye(features, classes, dtype=np.float32)
    probe.linear.bias.data[:] = 0.0
    return probe


class TestMaskedPool:
    def test_renormalized_mean(self):
        rows = np.arange(8, dtype=np.float64).reshape(4, 2)
        keep = np.array([True, False, True, False])
        np.testing.assert_allclose(probes.masked_pool(rows, keep), rows[[0, 2]].mean(axis=0))

    def test_zero_fill_divides_by_all(self):
        rows = np.ones((4, 2))
        keep = np.array([True, False, False, False])
        np.testing.assert_allclose(probes.masked_pool(rows, keep, zero_fill=True), [0.25, 0.25])

    def test_empty_survivors(self):
        with pytest.raises(ValueError, match="survive"):
            probes.masked_pool(np.ones((4, 2)), np.zeros(4, dtype=bool))


class TestMaskingRobustness:
    def test_constant_grid_invariant_under_masking(self):
        grids = np.zeros((6, 3, 2, 2), dtype=np.float32)
        labels = np.array([0, 1, 2, 0, 1, 2])
        for i, lab in enumerate(labels):
            grids[i, lab] = 1.0
        images = grids  # stub replays by identity
        nets = _grid_nets(grids)
        probe = _identity_probe(3, 3)
        res = probes.masking_robustness(nets, probe, images, labels,
                                        fractions=(0.25, 0.5, 0.75), rng=np.random.default_rng(0))
        assert res["clean"] == 1.0
        assert all(acc == 1.0 for acc in res["per_fraction"].values())

    def test_zero_fraction_equals_clean(self):
        rng = np.random.default_rng(1)
        grids = rng.standard_normal((8, 3, 2, 2)).astype(np.float32)
        labels = rng.integers(0, 3, size=8)
        nets = _grid_nets(grids)
        probe = _identity_probe(3, 3)
        res = probes.masking_robustness(nets, probe, grids, labels, fractions=(0.0,))
        assert res["per_fraction"][0.0] == res["clean"]

    def test_subset_enumeration_oracle(self):
        # 2x2 grid, fraction 0.5: expected accuracy over the 6 survivor pairs
        rng = np.random.default_rng(2)
        base = rng.standard_normal((3, 2, 2)).astype(np.float32)
        label = 1
        probe = _identity_probe(3, 3)

        rows = base.reshape(3, 4).T
        from itertools import combinations

        hits = []
        for keep_idx in combinations(range(4), 2):
            keep = np.zeros(4, dtype=bool)
            keep[list(keep_idx)] = True
            pooled = probes.masked_pool(rows, keep)
            hits.append(np.argmax(pooled) == label)
        expected = np.mean(hits)
        assert 0.0 < expected < 1.0  # oracle is informative for this seed

        copies = 600
        grids = np.repeat(base[None], copies, axis=0)
        nets = _grid_nets(grids)
        res = probes.masking_robustness(
            nets, probe, grids, np.full(copies, label),
            fractions=(0.5,), rng=np.random.default_rng(3),
        )
        assert abs(res["per_fraction"][0.5] - expected) < 0.07

    def test_fraction_one_rejected(self):
        nets = _grid_nets(np.ones((1, 3, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="fractions"):
            probes.masking_robustness(nets, _identity_probe(3, 3),
                                      np.ones((1, 3, 2, 2), dtype=np.float32),
                                      [0], fractions=(1.0,))


class TestAttackSpec:
    def test_gamma_bound(self):
        with pytest.raises(ValueError, match="gamma"):
            AttackSpec(epsilon=0.01, gamma=0.02)

    def test_iterations_bound(self):
        with pytest.raises(ValueError, match="iterations"):
            AttackSpec(epsilon=0.01, gamma=0.001, iterations=0)

    def test_default_grid_shape(self):
        grid = probes.default_attack_grid()
        assert len(grid) == 16
        assert {s.epsilon for s in grid} == {0.003, 0.01, 0.03, 0.1}
        assert all(s.gamma in (s.epsilon / 40, s.epsilon / 10) for s in grid)


class _LinearToy:
    """Two-class linear model over flattened pixels."""

    def __init__(self, w, b):
        self.w = w.astype(np.float32)  # (features, 2)
        self.b = b.astype(np.float32)

    def logits_fn(self, x):
        n = x.data.shape[0]
        flat = T.reshape(x, (n, self.w.shape[0]))
        return T.add(T.matmul(flat, Tensor(self.w)), Tensor(self.b))


class TestPgd:
    def _toy(self, seed=0, n=40):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((12, 2))
        b = rng.standard_normal(2) * 0.1
        toy = _LinearToy(w, b)
        # interior pixels so the [0, 1] clamp never binds at small epsilon
        x = rng.uniform(0.35, 0.65, size=(n, 3, 2, 2))
        y = rng.integers(0, 2, size=n)
        return toy, x.astype(np.float32), y

    def test_epsilon_zero_equals_clean(self):
        toy, x, y = self._toy()
        res = probes.pgd_attack(toy.logits_fn, x, y, AttackSpec(epsilon=0.0, gamma=0.0))
        with T.no_grad():
            clean = (np.argmax(toy.logits_fn(Tensor(x)).data, axis=1) == y).mean()
        assert res["accuracy"] == pytest.approx(clean)

    def test_perturbation_bound(self):
        toy, x, y = self._toy(seed=1)
        spec = AttackSpec(epsilon=0.03, gamma=0.01, iterations=5)
        res = probes.pgd_attack(toy.logits_fn, x, y, spec)
        assert res["max_perturbation"] <= 0.03 + 1e-6

    def test_analytic_margin_oracle(self):
        # one sign step of size eps shifts the true-class margin by exactly
        # eps * ||w_true - w_other||_1 for a linear model away from the clamp
        toy, x, y = self._toy(seed=2, n=60)
        eps = 0.02
        res = probes.pgd_attack(toy.logits_fn, x, y, AttackSpec(epsilon=eps, gamma=eps))
        w_diff = toy.w[:, 0] - toy.w[:, 1]
        shift = eps * np.abs(w_diff).sum()
        flat = x.reshape(len(x), -1)
        margin = flat @ w_diff + (toy.b[0] - toy.b[1])
        margin_signed = np.where(y == 0, margin, -margin)
        expected = (margin_signed - shift > 0).mean()
        assert res["accuracy"] == pytest.approx(expected)

    def test_monotone_in_epsilon(self):
        toy, x, y = self._toy(seed=3, n=80)
        accs = []
        for eps in (0.003, 0.01, 0.03, 0.1):
            res = probes.pgd_attack(toy.logits_fn, x, y,
                                    AttackSpec(epsilon=eps, gamma=eps / 10, iterations=5))
            accs.append(res["accuracy"])
        assert all(b <= a for a, b in zip(accs, accs[1:]))


class _SingleConv:
    def __init__(self):
        self.conv = nn.Conv2d(3, 4, 3, stride=1, bias=False, rng=np.random.default_rng(0))

    def __call__(self, x, mode="eval", linearize=False):
        y = self.conv(x)
        pooled = T.global_avg_pool(y)
        return BackboneOutput(local=y, global_pooled=pooled, global_=pooled)


class TestErf:
    def test_single_conv_footprint_bound(self):
        nets = SimpleNamespace(backbone=_SingleConv())
        images = np.random.default_rng(0).uniform(size=(2, 3, 9, 9)).astype(np.float32)
        res = probes.erf_stats(nets, images, positions=[(4, 4)])
        for t in res["thresholds"]:
            assert all(v <= 3.0 for v in res["sqrt_counts"][t])

    def test_threshold_monotonicity(self):
        nets = SimpleNamespace(backbone=_SingleConv())
        images = np.random.default_rng(1).uniform(size=(3, 3, 9, 9)).astype(np.float32)
        res = probes.erf_stats(nets, images, positions=[(2, 2), (4, 4)])
        lo, hi = res["thresholds"]
        for a, b in zip(res["sqrt_counts"][lo], res["sqrt_counts"][hi]):
            assert b <= a

    def test_bounded_by_theoretical_rf(self):
        cfg = ArchConfig(base="rf_resnet18", small_image_stem=True, strides=(2, 1, 1),
                         blocks=(1, 1, 1, 1), width=0.125, post_pool_mlp=False)
        bb = rf.build_backbone(cfg, rng=np.random.default_rng(2))
        images = np.random.default_rng(3).uniform(size=(2, 3, 32, 32)).astype(np.float32)
        with T.no_grad():
            bb(Tensor(images), mode="train")  # initialize batch-norm stats
        nets = SimpleNamespace(backbone=bb)
        side = bb.grid_side(32)
        res = probes.erf_stats(nets, images, positions=[(side // 2, side // 2)])
        bound = rf.final_rf(cfg)
        for t in res["thresholds"]:
            assert all(v <= bound for v in res["sqrt_counts"][t])

    def test_empty_positions_rejected(self):
        nets = SimpleNamespace(backbone=_SingleConv())
        images = np.zeros((1, 3, 9, 9), dtype=np.float32)
        with pytest.raises(ValueError, match="position"):
            probes.erf_stats(nets, images, positions=[])

    def test_out_of_grid_rejected(self):
        nets = SimpleNamespace(backbone=_SingleConv())
        images = np.zeros((1, 3, 9, 9), dtype=np.float32)
        with pytest.raises(ValueError, match="outside"):
            probes.erf_stats(nets, images, positions=[(50, 0)])


class TestSimilarity:
    def test_intra_image_oracle(self):
        rng = np.random.default_rng(0)
        grid = rng.standard_normal((5, 2, 2))
        rows = grid.reshape(5, 4).T
        unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        sims = [unit[i] @ unit[j] for i in range(4) for j in range(4) if i != j]
        assert probes.intra_image_similarity(grid) == pytest.approx(np.mean(sims), abs=1e-9)

    def test_pearson_matches_corrcoef(self):
        rng = np.random.default_rng(1)
        grids = rng.standard_normal((12, 4, 3, 3)).astype(np.float32)
        nets = _grid_nets(grids)
        pairs = [tuple(rng.choice(12, size=2, replace=False)) for _ in range(50)]
        res = probes.similarity_correlation(nets, grids, pairs=pairs)
        oracle = np.corrcoef(res["global_sims"], res["local_sims"])[0, 1]
        assert res["pearson"] == pytest.approx(oracle, abs=1e-6)

    def test_self_pair_global_cosine_is_one(self):
        rng = np.random.default_rng(2)
        grids = rng.standard_normal((3, 4, 2, 2)).astype(np.float32)
        nets = _grid_nets(grids)
        res = probes.similarity_correlation(nets, grids, pairs=[(0, 0), (1, 2)])
        assert res["global_sims"][0] == pytest.approx(1.0, abs=1e-5)

    def test_degenerate_variance_reported(self):
        grids = np.ones((4, 3, 2, 2), dtype=np.float32)
        nets = _grid_nets(grids)
        res = probes.similarity_correlation(nets, grids, pairs=[(0, 1), (2, 3)])
        assert res["pearson"] is None

    def test_needs_two_images(self):
        grids = np.ones((1, 3, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="2 images"):
            probes.similarity_correlation(_grid_nets(grids), grids)


class TestTotalMinPortion:
    def test_whole_image_rf(self):
        assert probes.total_min_portion(300, (224, 224), 0.2) == pytest.approx(0.2)

    def test_published_values(self):
        assert probes.total_min_portion(99, (224, 224), 0.2) == pytest.approx(0.0391, abs=0.0005)
        assert probes.total_min_portion(29, (64, 64), 0.5) / 0.5 == pytest.approx(0.205, abs=0.005)

    def test_validation(self):
        with pytest.raises(ValueError, match="positive"):
            probes.total_min_portion(0, (10, 10), 0.2)
        with pytest.raises(ValueError, match="c_min"):
            probes.total_min_portion(3, (10, 10), 0.0)
