"""Optimizer, synthetic task, training-loop, config, and CLI tests."""

import dataclasses

import numpy as np
import pytest

from moonnet.attention import GateKind
from moonnet.augment import AugmentPackage
from moonnet.cli import main as cli_main
from moonnet.config import ConfigError, ExperimentConfig, parse_config_text
from moonnet.train import (
    PatchModel,
    SGD,
    SyntheticPatchTask,
    bce_with_logits,
    evaluate_model,
    load_model_checkpoint,
    resolution_sweep,
    save_model_checkpoint,
    sgd_step,
    train,
)


def tiny_cfg(**kw):
    base = dict(design_id=5, width=0.125, input_size=64, epochs=1,
                steps_per_epoch=5, batch=2, lr=0.01, momentum=0.9, seed=0)
    base.update(kw)
    return ExperimentConfig(**base)


class TestSgdStep:
    def test_single_step_no_momentum(self):
        theta = np.array([1.0, 2.0])
        v = np.zeros(2)
        sgd_step(theta, np.array([0.5, -1.0]), v, lr=0.1, momentum=0.0)
        assert np.allclose(theta, [0.95, 2.1])

    def test_momentum_accumulates(self):
        # two steps with constant gradient g=1: v goes 1, then 1.9
        theta = np.array([0.0])
        v = np.zeros(1)
        g = np.array([1.0])
        sgd_step(theta, g, v, lr=1.0, momentum=0.9)
        assert theta[0] == -1.0
        sgd_step(theta, g, v, lr=1.0, momentum=0.9)
        assert theta[0] == pytest.approx(-2.9)

    def test_in_place(self):
        theta = np.zeros(3)
        out = sgd_step(theta, np.ones(3), np.zeros(3), 0.1, 0.0)
        assert out is theta

    def test_quadratic_bowl_converges(self):
        # f(x) = 0.5 x^T A x with A = diag(1, 10)
        A = np.array([1.0, 10.0])
        x = np.array([5.0, -3.0])
        v = np.zeros(2)
        for _ in range(300):
            sgd_step(x, A * x, v, lr=0.1, momentum=0.9)
        assert float(np.abs(x).max()) < 1e-6


class TestBceWithLogits:
    def test_fixture(self):
        # z=0, y=1: loss = log 2; grad = (0.5 - 1) / 1
        loss, g = bce_with_logits(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)))
        assert loss == pytest.approx(np.log(2.0))
        assert g.flat[0] == pytest.approx(-0.5)

    def test_extreme_logits_stay_finite(self):
        z = np.array([[[[1000.0, -1000.0]]]])
        y = np.array([[[[1.0, 0.0]]]])
        loss, g = bce_with_logits(z, y)
        assert np.isfinite(loss) and np.isfinite(g).all()
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_matches_naive_formula(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((2, 1, 2, 2))
        y = (rng.random((2, 1, 2, 2)) > 0.5).astype(float)
        p = 1 / (1 + np.exp(-z))
        naive = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        loss, _ = bce_with_logits(z, y)
        assert loss == pytest.approx(naive)


class TestSyntheticTask:
    def test_sample_deterministic(self):
        task = SyntheticPatchTask(64)
        a, b = task.sample(3), task.sample(3)
        assert np.array_equal(a.image.values, b.image.values)
        assert len(a.boxes) == len(b.boxes)

    def test_patch_sizes_below_small_object_cutoff(self):
        task = SyntheticPatchTask(96)
        for seed in range(5):
            for b in task.sample(seed).boxes:
                assert b.area < 32 * 32
                assert 3 <= b.x2 - b.x1 <= 7

    def test_label_grid_matches_boxes(self):
        task = SyntheticPatchTask(64)
        li = task.sample(1)
        lab = task.label_grid(li)
        assert lab.shape == (1, 2, 2)
        assert lab.sum() == len(li.boxes)  # one patch per cell at most

    def test_values_in_unit_range(self):
        img = SyntheticPatchTask(64).sample(7).image.values
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_rejects_bad_size(self):
        with pytest.raises(ValueError):
            SyntheticPatchTask(48)

    def test_augmented_labels_stay_consistent(self):
        task = SyntheticPatchTask(64, AugmentPackage.VER2)
        for seed in range(5):
            li = task.sample(seed)
            lab = task.label_grid(li)
            assert lab.sum() == len(li.boxes)

    def test_batch_shapes(self):
        task = SyntheticPatchTask(64)
        x, labels, samples = task.batch([0, 1, 2])
        assert x.shape == (3, 3, 64, 64)
        assert labels.shape == (3, 1, 2, 2)
        assert len(samples) == 3


class TestPatchModel:
    def test_logit_grid_shape(self):
        model = PatchModel(tiny_cfg())
        task = SyntheticPatchTask(64)
        x, _, _ = task.batch([0, 1])
        assert model.forward(x).shape == (2, 1, 2, 2)

    def test_untrained_identity_designs_agree_bitwise(self):
        # residual-tanh attention at init vanishes, so design 5 must emit
        # the same logits as the attention-free design 0 under one seed
        task = SyntheticPatchTask(64)
        x, _, _ = task.batch([5])
        l0 = PatchModel(tiny_cfg(design_id=0)).forward(x, training=False)
        l5 = PatchModel(tiny_cfg(design_id=5, gate=GateKind.RESIDUAL_TANH)).forward(
            x, training=False)
        assert np.array_equal(l0, l5)


class TestTrainLoop:
    def test_deterministic_loss_log(self):
        a = train(tiny_cfg())
        b = train(tiny_cfg())
        assert a.losses == b.losses
        assert a.accuracies == b.accuracies

    def test_seed_changes_trajectory(self):
        a = train(tiny_cfg())
        b = train(tiny_cfg(seed=1))
        assert a.losses != b.losses

    def test_writes_log_and_checkpoints(self, tmp_path):
        result = train(tiny_cfg(), out_dir=tmp_path)
        log = (tmp_path / "train_log.txt").read_text().splitlines()
        assert log[0] == "step loss accuracy"
        assert len(log) == 1 + result.steps_run
        first = log[1].split()
        assert first[0] == "0" and float(first[1]) == pytest.approx(result.losses[0], abs=1e-6)
        assert (tmp_path / "final.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()

    def test_target_accuracy_stops_early(self):
        cfg = tiny_cfg(epochs=1, steps_per_epoch=400)
        result = train(cfg, target_accuracy=0.95)
        assert result.steps_run < 400
        assert result.final_accuracy >= 0.95

    def test_fixed_batch_loss_strictly_decreases(self):
        cfg = tiny_cfg(epochs=1, steps_per_epoch=30, lr=0.005, momentum=0.0)
        result = train(cfg, fixed_batch=True)
        diffs = np.diff(result.losses)
        assert np.all(diffs < 0.0)


class TestCheckpointGlue:
    def test_model_round_trip_bitwise_forward(self, tmp_path):
        cfg = tiny_cfg()
        result = train(cfg)
        p = tmp_path / "m.ckpt"
        save_model_checkpoint(result.model, cfg, p)
        model2, cfg2, rng_state = load_model_checkpoint(p)
        assert cfg2 == cfg
        task = SyntheticPatchTask(64)
        x, _, _ = task.batch([9])
        a = result.model.forward(x, training=False)
        b = model2.forward(x, training=False)
        assert np.array_equal(a, b)
        assert isinstance(rng_state, dict)

    def test_resume_rng_state_recorded(self, tmp_path):
        train(tiny_cfg(), out_dir=tmp_path)
        _, _, state = load_model_checkpoint(tmp_path / "final.ckpt")
        assert "state" in state or state == {}


class TestEvaluateModel:
    def test_trained_model_beats_chance(self):
        cfg = tiny_cfg(epochs=1, steps_per_epoch=400)
        result = train(cfg, target_accuracy=0.97)
        task = SyntheticPatchTask(64)
        metrics, acc = evaluate_model(result.model, task, n_images=16)
        assert acc > 0.9
        assert metrics.ap50 > 0.5

    def test_sweep_rows_structure(self):
        rows = resolution_sweep(tiny_cfg(epochs=1, steps_per_epoch=2), [64],
                                n_eval_images=2)
        assert len(rows) == 1
        assert {"size", "ap50", "ap75", "ap", "recall", "precision",
                "accuracy"} <= set(rows[0])


class TestConfig:
    def test_round_trip_through_text(self):
        cfg = tiny_cfg(design_id=2, gate=GateKind.SIGMOID_ORIGINAL,
                       augment=AugmentPackage.VER3)
        assert parse_config_text(cfg.to_text()) == cfg

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# a comment\n\nlr=0.5  # inline\n")
        assert cfg.lr == 0.5

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("warp_speed=9\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("lr=fast\n")

    @pytest.mark.parametrize("kw", [dict(input_size=50), dict(lr=-1.0),
                                    dict(design_id=9), dict(width=0.0),
                                    dict(momentum=1.0), dict(batch=0)])
    def test_validate_rejects(self, kw):
        with pytest.raises(ConfigError):
            dataclasses.replace(ExperimentConfig(), **kw).validate()


class TestCli:
    def test_train_success_exit_zero(self, tmp_path, capsys):
        rc = cli_main(["train", "--design", "5", "--width", "0.125",
                       "--epochs", "1", "--steps-per-epoch", "3", "--batch", "2",
                       "--out", str(tmp_path / "run")])
        assert rc == 0
        assert "trained 3 steps" in capsys.readouterr().out
        assert (tmp_path / "run" / "final.ckpt").exists()

    def test_invalid_config_exit_one(self, capsys):
        rc = cli_main(["train", "--size", "50"])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_missing_annotation_dir_exit_one(self, tmp_path):
        rc = cli_main(["evaluate", "--gt", str(tmp_path / "none"),
                       "--preds", str(tmp_path / "none")])
        assert rc == 1

    def test_stats_fixture(self, tmp_path, capsys):
        d = tmp_path / "ann"
        d.mkdir()
        (d / "a.txt").write_text("0 0 30 30 0\n0 0 28 37 0\n")
        rc = cli_main(["stats", str(d)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mean area: 968.0 px^2 (31.1 x 31.1)" in out

    def test_evaluate_dirs(self, tmp_path, capsys):
        gt, pr = tmp_path / "gt", tmp_path / "pr"
        gt.mkdir(), pr.mkdir()
        (gt / "i.txt").write_text("0 0 10 10 0\n")
        (pr / "i.txt").write_text("0 0 10 10 0 0.9\n")
        rc = cli_main(["evaluate", "--gt", str(gt), "--preds", str(pr)])
        assert rc == 0
        assert "ap50" in capsys.readouterr().out

    def test_augment_preview(self, capsys):
        rc = cli_main(["augment-preview", "--package", "ver2", "--seed", "1"])
        assert rc == 0
        assert "boxes in" in capsys.readouterr().out

    def test_config_file_merges_under_flags(self, tmp_path, capsys):
        cfgf = tmp_path / "c.cfg"
        cfgf.write_text("design_id=0\nepochs=1\nsteps_per_epoch=2\nwidth=0.125\nbatch=2\n")
        rc = cli_main(["train", "--config", str(cfgf), "--steps-per-epoch", "3"])
        assert rc == 0
        assert "trained 3 steps" in capsys.readouterr().out
