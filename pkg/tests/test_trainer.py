import numpy as np
import pytest

from cooc import data, trainer
from cooc import tensor as T
from cooc.rf import ArchConfig
from cooc.tensor import Tensor
from cooc.trainer import ProbeHead, TrainConfig


def tiny_config(tmp_path, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 8)
    kw.setdefault("proj_hidden", 16)
    kw.setdefault("proj_out", 8)
    kw.setdefault("base_lr", 0.05)
    kw.setdefault("seed", 0)
    cfg = TrainConfig(dataset=str(tmp_path / "train.bin"), **kw)
    return cfg


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    images, labels = data.make_toy_dataset(6, np.random.default_rng(0))
    data.write_records(root / "train.bin", images, labels)
    return root


class TestSchedule:
    def test_constant(self):
        cfg = TrainConfig(lr_schedule="constant", base_lr=0.3)
        assert trainer.lr_at(cfg, 0, 100) == 0.3
        assert trainer.lr_at(cfg, 99, 100) == 0.3

    def test_warmup_then_cosine(self):
        cfg = TrainConfig(base_lr=1.0, warmup_frac=0.1)
        total = 100
        lrs = [trainer.lr_at(cfg, s, total) for s in range(total)]
        assert lrs[0] == pytest.approx(0.1)  # first warmup step
        assert max(lrs) == pytest.approx(1.0)
        assert all(b <= a + 1e-12 for a, b in zip(lrs[10:], lrs[11:]))  # decays after warmup
        assert lrs[-1] < 0.01


class TestProbe:
    def test_constant_predictor_on_balanced_set(self):
        probe = ProbeHead(4, 10, lr=0.1)
        probe.linear.weight.data[:] = 0.0
        probe.linear.bias.data[:] = 0.0
        probe.linear.bias.data[0] = 5.0  # always class 0
        feats = np.random.default_rng(0).standard_normal((100, 4)).astype(np.float32)
        labels = np.repeat(np.arange(10), 10)
        pred = probe.predict(Tensor(feats))
        assert (pred == 0).all()
        assert (pred == labels).mean() == pytest.approx(0.1)

    def test_separable_features_reach_perfect(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 10, size=200)
        feats = np.eye(10, dtype=np.float32)[labels] * 3.0
        probe = ProbeHead(10, 10, lr=0.5, rng=rng)
        for _ in range(60):
            probe.step(Tensor(feats), labels)
        pred = probe.predict(Tensor(feats))
        assert (pred == labels).mean() == 1.0

    def test_loss_decreases(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 10, size=64)
        feats = np.eye(10, dtype=np.float32)[labels] + 0.1 * rng.standard_normal((64, 10)).astype(np.float32)
        probe = ProbeHead(10, 10, lr=0.5, rng=rng)
        first = probe.step(Tensor(feats), labels)
        for _ in range(30):
            last = probe.step(Tensor(feats), labels)
        assert last < first

    def test_label_range_checked(self):
        probe = ProbeHead(4, 3, lr=0.1)
        with pytest.raises(ValueError, match="classes"):
            probe.step(Tensor(np.zeros((2, 4), dtype=np.float32)), np.array([0, 3]))


class TestTrainStep:
    def _setup(self, w_s=0.5, seed=0):
        cfg = TrainConfig(proj_hidden=16, proj_out=8, w_s=w_s, seed=seed)
        nets, probe, opt = trainer.build_state(cfg)
        rng = np.random.default_rng(99)
        v1 = rng.uniform(size=(4, 3, 32, 32)).astype(np.float32)
        v2 = rng.uniform(size=(4, 3, 32, 32)).astype(np.float32)
        labels = rng.integers(0, 10, size=4)
        return nets, probe, opt, (v1, v2), labels

    def test_zero_lr_freezes_backbone_probe_moves(self):
        nets, probe, opt, views, labels = self._setup()
        before = [p.data.copy() for p in nets.online_parameters()]
        probe_before = probe.linear.weight.data.copy()
        trainer.train_step(nets, probe, opt, views, labels, lr=0.0)
        for old, p in zip(before, nets.online_parameters()):
            np.testing.assert_array_equal(p.data, old)
        assert not np.array_equal(probe.linear.weight.data, probe_before)

    def test_probe_isolation(self):
        # many probe steps with backbone lr 0 leave every parameter untouched
        nets, probe, opt, views, labels = self._setup()
        before = [p.data.copy() for p in nets.online_parameters()]
        for _ in range(5):
            trainer.train_step(nets, probe, opt, views, labels, lr=0.0)
        for old, p in zip(before, nets.online_parameters()):
            np.testing.assert_array_equal(p.data, old)

    def test_determinism(self):
        a = self._setup(seed=3)
        b = self._setup(seed=3)
        rec_a = trainer.train_step(a[0], a[1], a[2], a[3], a[4], lr=0.1)
        rec_b = trainer.train_step(b[0], b[1], b[2], b[3], b[4], lr=0.1)
        assert rec_a == rec_b

    def test_ema_moves_target(self):
        nets, probe, opt, views, labels = self._setup()
        before = nets.target_backbone.stem.weight.data.copy()
        trainer.train_step(nets, probe, opt, views, labels, lr=0.1)
        assert not np.array_equal(nets.target_backbone.stem.weight.data, before)

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_non_finite_aborts_with_record(self):
        nets, probe, opt, views, labels = self._setup()
        nets.q1.net.layers[-1].weight.data[:] = np.inf
        with pytest.raises(trainer.TrainingDiverged) as err:
            trainer.train_step(nets, probe, opt, views, labels, lr=0.1, epoch=2, step=17)
        assert err.value.record["epoch"] == 2
        assert err.value.record["step"] == 17


class TestCheckpoint:
    def _state(self, seed=0):
        cfg = TrainConfig(proj_hidden=16, proj_out=8, seed=seed)
        nets, probe, opt = trainer.build_state(cfg)
        return cfg, nets, probe, opt

    def test_roundtrip_bit_identical(self, tmp_path):
        cfg, nets, probe, opt = self._state()
        rng = np.random.default_rng(5)
        path = tmp_path / "a.bin"
        trainer.save_checkpoint(path, nets, probe, opt, cfg, 3, 42, rng)
        cfg2, nets2, probe2, opt2 = self._state(seed=7)  # different weights
        rng2 = np.random.default_rng(1)
        meta = trainer.load_checkpoint(path, nets2, probe2, opt2, rng=rng2)
        assert meta["epoch"] == 3 and meta["step"] == 42
        assert rng2.bit_generator.state == rng.bit_generator.state
        path2 = tmp_path / "b.bin"
        trainer.save_checkpoint(path2, nets2, probe2, opt2, cfg, 3, 42, rng2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_rejected(self, tmp_path):
        cfg, nets, probe, opt = self._state()
        path = tmp_path / "a.bin"
        trainer.save_checkpoint(path, nets, probe, opt, cfg, 0, 0, np.random.default_rng(0))
        clipped = tmp_path / "clipped.bin"
        clipped.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(ValueError, match="truncated"):
            trainer.read_checkpoint(clipped)

    def test_arch_mismatch_names_tensor(self, tmp_path):
        cfg, nets, probe, opt = self._state()
        path = tmp_path / "a.bin"
        trainer.save_checkpoint(path, nets, probe, opt, cfg, 0, 0, np.random.default_rng(0))
        other = TrainConfig(
            proj_hidden=16, proj_out=8,
            arch=ArchConfig(base="rf_resnet18", small_image_stem=True,
                            strides=(2, 1, 1), blocks=(1, 1, 1, 1), width=0.25),
        )
        nets2, probe2, opt2 = trainer.build_state(other)
        with pytest.raises(ValueError, match="online.backbone"):
            trainer.load_checkpoint(path, nets2, probe2, opt2)

    def test_hash_mismatch_warns(self, tmp_path):
        cfg, nets, probe, opt = self._state()
        path = tmp_path / "a.bin"
        trainer.save_checkpoint(path, nets, probe, opt, cfg, 0, 0, np.random.default_rng(0))
        other = TrainConfig(proj_hidden=16, proj_out=8, base_lr=0.123)
        nets2, probe2, opt2 = trainer.build_state(other)
        with pytest.warns(UserWarning, match="hash"):
            trainer.load_checkpoint(path, nets2, probe2, opt2, config=other)

    def test_not_a_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError, match="not a checkpoint"):
            trainer.read_checkpoint(bad)


class TestFit:
    def test_zero_epochs_checkpoint_equals_init(self, corpus, tmp_path):
        cfg = tiny_config(corpus, epochs=0)
        run = tmp_path / "run"
        nets, probe, opt = trainer.build_state(cfg)
        init = [p.data.copy() for p in nets.online_parameters()]
        trainer.fit(cfg, run_dir=run)
        nets2, probe2, opt2 = trainer.build_state(cfg)
        trainer.load_checkpoint(run / "ckpt-final.bin", nets2, probe2, opt2)
        for old, p in zip(init, nets2.online_parameters()):
            np.testing.assert_array_equal(p.data, old)

    def test_metrics_deterministic(self, corpus, tmp_path):
        cfg = tiny_config(corpus, epochs=1)
        run_a, run_b = tmp_path / "a", tmp_path / "b"
        trainer.fit(cfg, run_dir=run_a)
        trainer.fit(cfg, run_dir=run_b)
        assert (run_a / "metrics.csv").read_bytes() == (run_b / "metrics.csv").read_bytes()
        assert (run_a / "ckpt-final.bin").read_bytes() == (run_b / "ckpt-final.bin").read_bytes()

    def test_loss_trends_down(self, corpus, tmp_path):
        cfg = tiny_config(corpus, epochs=5, base_lr=0.1)
        _, _, history = trainer.fit(cfg, run_dir=tmp_path / "run")
        assert history[-1]["loss_total"] < history[0]["loss_total"]

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        full = tiny_config(corpus, epochs=3, checkpoint_every=1)
        run_full = tmp_path / "full"
        trainer.fit(full, run_dir=run_full)

        run_resumed = tmp_path / "resumed"
        run_resumed.mkdir()
        # replay the first epoch's metrics, then resume from its checkpoint
        lines = (run_full / "metrics.csv").read_text().splitlines(keepends=True)
        (run_resumed / "metrics.csv").write_text("".join(lines[:2]))
        trainer.fit(full, run_dir=run_resumed, resume=run_full / "ckpt-0001.bin")
        assert (run_resumed / "metrics.csv").read_bytes() == (run_full / "metrics.csv").read_bytes()
        assert (run_resumed / "ckpt-final.bin").read_bytes() == (run_full / "ckpt-final.bin").read_bytes()

    def test_bad_dataset_fails_before_training(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"\x00" * 17)
        cfg = TrainConfig(dataset=str(bad), proj_hidden=16, proj_out=8)
        with pytest.raises(ValueError, match="record"):
            trainer.fit(cfg)

    def test_eval_layers_give_distinct_numbers(self, corpus, tmp_path):
        cfg = tiny_config(corpus, epochs=1)
        nets, probe, opt = trainer.build_state(cfg)
        images, labels = data.read_records(corpus / "train.bin")
        # one step initializes batch-norm running statistics for eval mode
        batch = trainer._chw(images[:8])
        trainer.train_step(nets, probe, opt, (batch, batch), labels[:8], lr=0.01)
        a = trainer.probe_accuracy(nets, probe, trainer._chw(images), labels, "patch")
        b = trainer.probe_accuracy(nets, probe, trainer._chw(images), labels, "post_mlp")
        assert 0.0 <= a <= 1.0 and 0.0 <= b <= 1.0
        feats_a = trainer.extract_features(nets, trainer._chw(images[:4]), "patch")
        feats_b = trainer.extract_features(nets, trainer._chw(images[:4]), "post_mlp")
        assert not np.allclose(feats_a, feats_b)


class TestConfig:
    def test_hash_changes_with_fields(self):
        a = TrainConfig(base_lr=0.4)
        b = TrainConfig(base_lr=0.2)
        assert a.config_hash() != b.config_hash()
        assert a.config_hash() == TrainConfig(base_lr=0.4).config_hash()

    def test_hash_covers_arch(self):
        a = TrainConfig()
        b = TrainConfig(arch=ArchConfig(base="rf_resnet18", small_image_stem=True,
                                        strides=(2, 1, 1), blocks=(1, 1, 1, 1), width=0.25))
        assert a.config_hash() != b.config_hash()

    def test_rejects_unknown_choices(self):
        with pytest.raises(ValueError, match="schedule"):
            TrainConfig(lr_schedule="linear")
        with pytest.raises(ValueError, match="eval layer"):
            TrainConfig(eval_layer="logits")
