import dataclasses
import math

import numpy as np
import pytest

import lrcl.data as data
import lrcl.model as model
import lrcl.training as training
from lrcl.errors import ConfigError, DataError, NumericError, ParameterError
from lrcl.evaluation import alignment_gap
from lrcl.tensor_core import Rng, Tensor


def synth(n_classes=4, per_class=16, seed=0, noiseless=False, t=60):
    cfg = data.SynthConfig(
        n_classes=n_classes,
        windows_per_class=per_class,
        window_len=t,
        noise_sigma=0.0 if noiseless else 0.1,
        phase_jitter=0.0 if noiseless else 0.3,
    )
    return data.synth_generate(cfg, Rng(seed))


def identical_pairs_dataset(n_pairs=8, t=60):
    window = Rng(1).normal(size=(3, t)).astype(np.float32)
    pairs = [
        data.WindowPair(left=window.copy(), right=window.copy(), label=0)
        for _ in range(n_pairs)
    ]
    return data.WindowedDataset(pairs=pairs, sample_rate_hz=30.0, window_len=t,
                                class_names=["a", "b"])


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert training.cosine_lr(0, 100, 0.004) == 0.004
        assert abs(training.cosine_lr(100, 100, 0.004)) < 1e-18
        assert abs(training.cosine_lr(50, 100, 0.004) - 0.002) < 1e-12

    def test_monotone_nonincreasing(self):
        values = [training.cosine_lr(s, 500, 0.004) for s in range(501)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_bad_arguments(self):
        with pytest.raises(ParameterError):
            training.cosine_lr(0, 0, 0.004)
        with pytest.raises(ParameterError):
            training.cosine_lr(5, 4, 0.004)


class TestSgdStep:
    def test_zero_lr_no_change(self):
        t = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        t.grad = np.full(4, 2.0, dtype=np.float32)
        training.sgd_step({"t": t}, 0.0)
        assert np.array_equal(t.data, np.ones(4))

    def test_basic_update(self):
        t = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        t.grad = np.array([2.0], dtype=np.float32)
        training.sgd_step({"t": t}, 0.5)
        assert np.array_equal(t.data, [0.0])

    def test_frozen_untouched(self):
        frozen = Tensor(np.ones(3, dtype=np.float32), requires_grad=False)
        frozen.grad = np.ones(3, dtype=np.float32)  # must be ignored
        before = frozen.data.copy()
        training.sgd_step({"t": frozen}, 1.0)
        assert np.array_equal(frozen.data, before)

    def test_momentum_accumulates(self):
        t = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        velocities = {}
        for _ in range(2):
            t.grad = np.array([1.0], dtype=np.float32)
            training.sgd_step({"t": t}, 1.0, momentum=0.5, velocities=velocities)
        # steps: v=1 -> -1; v=1.5 -> -2.5 total
        assert np.allclose(t.data, [-2.5])


class TestAdamStep:
    def test_zero_gradient_no_change(self):
        t = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        t.grad = np.zeros(4, dtype=np.float32)
        state = training.AdamState()
        training.adam_step({"t": t}, state, 0.1, t=1)
        assert np.array_equal(t.data, np.ones(4))

    @pytest.mark.parametrize("c", [3.0, -0.25])
    def test_first_step_is_signed_lr(self, c):
        t = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
        t.grad = np.full(5, c, dtype=np.float32)
        training.adam_step({"t": t}, training.AdamState(), 0.01, t=1)
        # first bias-corrected step: m_hat/sqrt(v_hat) = c/|c|
        assert np.allclose(t.data, -0.01 * np.sign(c), atol=1e-6)

    def test_t_zero_rejected(self):
        t = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        with pytest.raises(ParameterError):
            training.adam_step({"t": t}, training.AdamState(), 0.01, t=0)

    def test_deterministic(self):
        def run():
            t = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
            state = training.AdamState()
            for step in range(1, 6):
                t.grad = (t.data * 0.5).astype(np.float32)
                training.adam_step({"t": t}, state, 0.05, t=step)
            return t.data.copy()

        assert np.array_equal(run(), run())


class TestEarlyStopper:
    def test_contrived_sequence(self):
        stopper = training.EarlyStopper(patience=5)
        losses = [5.0, 4.0, 3.0, 3.1, 3.2, 3.3, 3.4, 3.5]
        stopped_at = None
        for epoch, loss in enumerate(losses, start=1):
            stopper.update(loss)
            if stopper.should_stop:
                stopped_at = epoch
                break
        assert stopped_at == 8
        assert stopper.best_epoch == 3

    def test_no_stop_while_improving(self):
        stopper = training.EarlyStopper(patience=2)
        for loss in [5.0, 4.0, 3.0, 2.0]:
            stopper.update(loss)
            assert not stopper.should_stop


class TestConfigs:
    def test_pretrain_defaults_match_published_recipe(self):
        cfg = training.PretrainConfig()
        assert cfg.batch_size == 64
        assert cfg.temperature == 0.05
        assert cfg.base_lr == 0.004
        assert cfg.epochs == 200

    def test_single_pair_batch_rejected(self):
        with pytest.raises(ParameterError, match="negatives"):
            training.PretrainConfig(batch_size=1)

    def test_finetune_defaults(self):
        cfg = training.FinetuneConfig()
        assert cfg.lr == 0.0001
        assert cfg.epochs == 50
        assert cfg.patience == 5

    def test_bad_policies(self):
        with pytest.raises(ConfigError):
            training.FinetuneConfig(freeze_policy="everything")
        with pytest.raises(ConfigError):
            training.FinetuneConfig(input_policy="middle")


class TestPretrainLrSsl:
    def test_identical_windows_start_at_log_2n_minus_1(self):
        ds = identical_pairs_dataset(n_pairs=8)
        enc = model.init_encoder(Rng(0), dropout_rate=0.0)
        head = model.init_head(Rng(1))
        cfg = training.PretrainConfig(batch_size=8, epochs=1, seed=0)
        _, _, trace = training.pretrain_lr_ssl(ds, enc, head, cfg)
        first_loss = trace.steps[0][2]
        assert abs(first_loss - math.log(2 * 8 - 1)) < 1e-4

    def test_loss_decreases_on_noiseless_synth(self):
        # 4 classes x 128 = 512 pairs, averaged over 3 seeds
        drops = []
        for seed in range(3):
            ds = synth(n_classes=4, per_class=128, seed=seed, noiseless=True)
            enc = model.init_encoder(Rng(seed), dropout_rate=0.1)
            head = model.init_head(Rng(seed + 10))
            cfg = training.PretrainConfig(epochs=10, seed=seed)
            _, _, trace = training.pretrain_lr_ssl(ds, enc, head, cfg)
            drops.append(trace.epoch_means[0] - trace.epoch_means[9])
        assert np.mean(drops) > 0

    def test_same_seed_bitwise_identical_trace(self):
        ds = synth(per_class=32, seed=3)

        def run():
            enc = model.init_encoder(Rng(5))
            head = model.init_head(Rng(6))
            cfg = training.PretrainConfig(batch_size=16, epochs=2, seed=9)
            return training.pretrain_lr_ssl(ds, enc, head, cfg)[2]

        assert run().steps == run().steps

    def test_dataset_smaller_than_batch(self):
        ds = synth(per_class=4)
        cfg = training.PretrainConfig(batch_size=64, epochs=1)
        with pytest.raises(DataError, match="smaller"):
            training.pretrain_lr_ssl(ds, model.init_encoder(Rng(0)),
                                     model.init_head(Rng(1)), cfg)

    def test_nan_loss_raises_numeric_error(self):
        ds = synth(per_class=8)
        ds.pairs[0].left[:] = np.float32(3e38)  # overflows float32 activations
        cfg = training.PretrainConfig(batch_size=16, epochs=1)
        with np.errstate(all="ignore"), pytest.raises(NumericError):
            training.pretrain_lr_ssl(ds, model.init_encoder(Rng(0)),
                                     model.init_head(Rng(1)), cfg)


class TestPretrainSimclr:
    def test_identity_rotations_give_log_2n_minus_1(self):
        ds = identical_pairs_dataset(n_pairs=8)
        enc = model.init_encoder(Rng(0), dropout_rate=0.0)
        head = model.init_head(Rng(1))
        cfg = training.PretrainConfig(batch_size=8, epochs=1, seed=0)
        _, _, trace = training.pretrain_simclr(
            ds, enc, head, cfg, rotation_sampler=lambda rng: np.eye(3)
        )
        assert abs(trace.steps[0][2] - math.log(15.0)) < 1e-4

    def test_loss_decreases(self):
        ds = synth(n_classes=4, per_class=64, seed=1)
        enc = model.init_encoder(Rng(2))
        head = model.init_head(Rng(3))
        cfg = training.PretrainConfig(batch_size=32, epochs=10, seed=4)
        _, _, trace = training.pretrain_simclr(ds, enc, head, cfg)
        assert trace.epoch_means[9] < trace.epoch_means[0]

    def test_same_seed_identical(self):
        ds = synth(per_class=16, seed=5)

        def run():
            enc = model.init_encoder(Rng(7))
            head = model.init_head(Rng(8))
            cfg = training.PretrainConfig(batch_size=16, epochs=2, seed=11)
            return training.pretrain_simclr(ds, enc, head, cfg)[2]

        assert run().steps == run().steps

    def test_side_selection(self):
        ds = synth(per_class=16, seed=6)
        for pair in ds.pairs:
            pair.right[:] = np.nan  # poisoned: must never be read
        enc = model.init_encoder(Rng(0))
        head = model.init_head(Rng(1))
        cfg = training.PretrainConfig(batch_size=16, epochs=1, seed=0,
                                      simclr_side="left")
        _, _, trace = training.pretrain_simclr(ds, enc, head, cfg)
        assert all(math.isfinite(v) for _, _, v in trace.steps)


def finetune_fixture(seed=0, per_class=8):
    train = synth(n_classes=3, per_class=per_class, seed=seed)
    val = synth(n_classes=3, per_class=4, seed=seed + 100)
    enc = model.init_encoder(Rng(seed))
    clf = model.init_classifier(Rng(seed + 1), 3)
    return train, val, enc, clf


class TestFinetune:
    def test_frozen_convs_bitwise_unchanged(self):
        train, val, enc, clf = finetune_fixture()
        before = {n: t.data.copy() for n, t in enc.tensors().items()}
        cfg = training.FinetuneConfig(epochs=3, batch_size=8, seed=2)
        training.finetune(enc, clf, train, val, cfg)
        for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b"):
            assert np.array_equal(enc.tensors()[name].data, before[name]), name
        assert not np.array_equal(enc.conv3_w.data, before["conv3_w"])

    def test_linear_probe_freezes_everything(self):
        train, val, enc, clf = finetune_fixture()
        before = {n: t.data.copy() for n, t in enc.tensors().items()}
        cfg = training.FinetuneConfig(epochs=2, batch_size=8,
                                      freeze_policy="all")
        training.finetune(enc, clf, train, val, cfg)
        for name, arr in before.items():
            assert np.array_equal(enc.tensors()[name].data, arr)

    def test_early_stop_restores_best_epoch_weights(self):
        train, val, enc, clf = finetune_fixture()
        losses = [5.0, 4.0, 3.0, 3.1, 3.2, 3.3, 3.4, 3.5, 2.0]
        snapshots = {}

        def on_epoch_end(epoch, e, c):
            snapshots[epoch] = {
                **{f"e.{n}": t.data.copy() for n, t in e.tensors().items()},
                **{f"c.{n}": t.data.copy() for n, t in c.tensors().items()},
            }

        cfg = training.FinetuneConfig(epochs=20, batch_size=8, patience=5, seed=3)
        _, _, trace, best_epoch = training.finetune(
            enc, clf, train, val, cfg,
            val_loss_fn=lambda epoch: losses[epoch - 1],
            on_epoch_end=on_epoch_end,
        )
        assert len(trace.val_losses) == 8  # stopped after epoch 8, never saw 2.0
        assert best_epoch == 3
        expected = snapshots[3]
        now = {
            **{f"e.{n}": t.data for n, t in enc.tensors().items()},
            **{f"c.{n}": t.data for n, t in clf.tensors().items()},
        }
        for name, arr in expected.items():
            assert np.array_equal(now[name], arr), name

    def test_validation_required(self):
        train, _, enc, clf = finetune_fixture()
        empty_val = dataclasses.replace(train, pairs=[])
        cfg = training.FinetuneConfig(epochs=1, batch_size=8)
        with pytest.raises(ConfigError):
            training.finetune(enc, clf, train, empty_val, cfg)

    def test_every_class_must_be_labeled(self):
        train, val, enc, clf = finetune_fixture()
        for p in train.pairs:
            if p.label == 1:
                p.label = -1
        cfg = training.FinetuneConfig(epochs=1, batch_size=8)
        with pytest.raises(DataError, match=r"\[1\]"):
            training.finetune(enc, clf, train, val, cfg)

    def test_deterministic(self):
        def run():
            train, val, enc, clf = finetune_fixture(seed=4)
            cfg = training.FinetuneConfig(epochs=3, batch_size=8, seed=5)
            _, _, trace, _ = training.finetune(enc, clf, train, val, cfg)
            return trace.steps

        assert run() == run()


class TestTrainSupervised:
    def test_input_policy_counts(self):
        ds = synth(n_classes=3, per_class=8)
        left = training.classification_examples(ds, "left")
        both = training.classification_examples(ds, "both")
        assert len(both) == 2 * len(left)
        unlabeled = dataclasses.replace(
            ds, pairs=[dataclasses.replace(p, label=-1) for p in ds.pairs]
        )
        assert training.classification_examples(unlabeled, "both") == []

    def test_left_policy_never_reads_right(self):
        train = synth(n_classes=3, per_class=8, seed=6)
        val = synth(n_classes=3, per_class=4, seed=106)
        for p in train.pairs + val.pairs:
            p.right[:] = np.nan
        cfg = training.FinetuneConfig(epochs=2, batch_size=8,
                                      input_policy="left", seed=7)
        _, _, trace, _ = training.train_supervised(train, val, cfg)
        assert all(math.isfinite(v) for _, _, v in trace.steps)

    def test_deterministic(self):
        train = synth(n_classes=3, per_class=8, seed=8)
        val = synth(n_classes=3, per_class=4, seed=108)
        cfg = training.FinetuneConfig(epochs=2, batch_size=8, seed=9)

        def run():
            return training.train_supervised(train, val, cfg)[2].steps

        assert run() == run()


class TestAlignmentProperty:
    def test_partner_similarity_gap_after_pretraining(self):
        # noiseless mirrored data, 256 pairs, full 50-epoch schedule
        ds = synth(n_classes=4, per_class=64, seed=12, noiseless=True)
        enc = model.init_encoder(Rng(20))
        head = model.init_head(Rng(21))
        cfg = training.PretrainConfig(epochs=50, seed=22)
        training.pretrain_lr_ssl(ds, enc, head, cfg)
        partner, non_partner = alignment_gap(enc, head, ds)
        assert partner - non_partner >= 0.2
