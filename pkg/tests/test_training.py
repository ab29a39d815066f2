import dataclasses
import json

import numpy as np
import pytest
import torch

from spad.data import Manifest, SampleRecord, UnlabeledDataset
from spad.errors import CheckpointError, ConfigError, DivergenceError
from spad.training import (TrainConfig, batches_per_epoch, epoch_order, fit,
                           load_checkpoint, read_log, resume, sgd_update)


def _dataset(images):
    return UnlabeledDataset.from_arrays(images)


def _toy_config(**kw):
    base = dict(learning_rate=0.05, momentum=0.9, weight_decay=5e-4,
                lr_gamma=0.98, batch_size=8, epochs=3, warmup_epochs=1,
                m=2.0, r=0.5, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults_validate(self):
        TrainConfig().validate()

    @pytest.mark.parametrize("kw", [
        dict(warmup_epochs=25),            # not < epochs
        dict(batch_size=1),
        dict(learning_rate=0.0),
        dict(lr_gamma=-1.0),
        dict(epochs=0),
        dict(m=0.5),
        dict(r=0.0),
    ])
    def test_invalid_configs(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


class TestSGDUpdate:
    def test_zero_grad_zero_decay_leaves_params(self):
        p = torch.tensor([1.0, -2.0])
        buf = torch.zeros(2)
        sgd_update([p], [torch.zeros(2)], [buf], lr=0.1, momentum=0.9,
                   weight_decay=0.0)
        assert torch.equal(p, torch.tensor([1.0, -2.0]))
        assert torch.all(buf == 0)

    def test_buffer_decays_by_momentum_factor(self):
        p = torch.tensor([1.0])
        buf = torch.tensor([0.5])
        sgd_update([p], [torch.zeros(1)], [buf], lr=0.1, momentum=0.9,
                   weight_decay=0.0)
        assert torch.allclose(buf, torch.tensor([0.45]))
        assert float(p) == pytest.approx(1.0 - 0.1 * 0.45)

    def test_plain_gradient_step(self):
        p = torch.tensor([1.0])
        sgd_update([p], [torch.tensor([1.0])], [torch.zeros(1)], lr=0.1,
                   momentum=0.0, weight_decay=0.0)
        assert float(p) == pytest.approx(0.9)

    def test_weight_decay_term(self):
        p = torch.tensor([1.0])
        sgd_update([p], [torch.tensor([0.0])], [torch.zeros(1)], lr=0.1,
                   momentum=0.0, weight_decay=0.5)
        assert float(p) == pytest.approx(0.95)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_update([torch.zeros(2)], [torch.zeros(3)], [torch.zeros(2)],
                       lr=0.1, momentum=0.0, weight_decay=0.0)


class TestFit:
    def test_spl_disabled_keeps_unit_weights(self, tiny_arch, toy_images):
        result = fit(_dataset(toy_images), _toy_config(spl_enabled=False, epochs=2),
                     tiny_arch)
        for report in result.reports:
            assert report.weights == (1.0,) * len(report.weights)
            assert report.lambda_used is None
        assert result.spl_state.step == 0

    def test_step_accounting(self, tiny_arch, toy_images):
        cfg = _toy_config(epochs=3, warmup_epochs=1)
        result = fit(_dataset(toy_images), cfg, tiny_arch)
        per_epoch = batches_per_epoch(len(toy_images), cfg.batch_size)
        assert len(result.reports) == cfg.epochs * per_epoch
        assert result.spl_state.step == (cfg.epochs - cfg.warmup_epochs) * per_epoch

    def test_warmup_reports_are_unit(self, tiny_arch, toy_images):
        cfg = _toy_config(epochs=3, warmup_epochs=2)
        result = fit(_dataset(toy_images), cfg, tiny_arch)
        per_epoch = batches_per_epoch(len(toy_images), cfg.batch_size)
        for report in result.reports[:cfg.warmup_epochs * per_epoch]:
            assert report.weights == (1.0,) * len(report.weights)
            assert report.lambda_used is None

    def test_lr_schedule_exact(self, tiny_arch, toy_images):
        cfg = _toy_config(epochs=4)
        result = fit(_dataset(toy_images), cfg, tiny_arch)
        for e, summary in enumerate(result.epoch_summaries):
            assert summary["lr"] == cfg.learning_rate * cfg.lr_gamma ** e

    def test_seed_determinism_bitwise(self, tiny_arch, toy_images):
        a = fit(_dataset(toy_images), _toy_config(), tiny_arch)
        b = fit(_dataset(toy_images), _toy_config(), tiny_arch)
        for ta, tb in zip(a.model.state_dict().values(),
                          b.model.state_dict().values()):
            assert torch.equal(ta, tb)
        assert [r.losses for r in a.reports] == [r.losses for r in b.reports]

    def test_identity_preprocessing_changes_nothing(self, tiny_arch, toy_images):
        a = fit(_dataset(toy_images), _toy_config(), tiny_arch)
        b = fit(_dataset(toy_images * 1.0), _toy_config(), tiny_arch)
        for ta, tb in zip(a.model.state_dict().values(),
                          b.model.state_dict().values()):
            assert torch.equal(ta, tb)

    def test_nan_image_surfaces_divergence_with_step(self, tiny_arch, toy_images):
        poisoned = toy_images.copy()
        poisoned[:, 0, 0, 0] = np.nan  # every batch is poisoned
        with pytest.raises(DivergenceError, match="step 0"):
            fit(_dataset(poisoned), _toy_config(), tiny_arch)

    def test_single_leftover_sample_dropped(self, tiny_arch):
        rng = np.random.default_rng(0)
        images = rng.uniform(0, 1, size=(9, 16, 16, 3)).astype(np.float32)
        cfg = _toy_config(batch_size=8, epochs=1, warmup_epochs=0)
        result = fit(_dataset(images), cfg, tiny_arch)
        assert len(result.reports) == 1  # 8-batch kept, leftover of 1 dropped

    def test_empty_dataset_rejected(self, tiny_arch):
        empty = UnlabeledDataset.from_arrays(np.empty((0, 16, 16, 3), np.float32))
        with pytest.raises(ConfigError):
            fit(empty, _toy_config(), tiny_arch)

    def test_label_firewall_rejects_manifest(self, tiny_arch, tmp_path):
        manifest = Manifest([SampleRecord("a", tmp_path / "x.png", "bonafide")])
        with pytest.raises(TypeError, match="UnlabeledDataset"):
            fit(manifest, _toy_config(), tiny_arch)


class TestEpochOrder:
    def test_deterministic_per_epoch(self):
        assert np.array_equal(epoch_order(50, 3, 2), epoch_order(50, 3, 2))
        assert not np.array_equal(epoch_order(50, 3, 2), epoch_order(50, 3, 3))

    def test_batches_per_epoch_rules(self):
        assert batches_per_epoch(64, 64) == 1
        assert batches_per_epoch(65, 64) == 1   # leftover of 1 dropped
        assert batches_per_epoch(66, 64) == 2
        assert batches_per_epoch(20, 8) == 3


class TestCheckpointResume:
    def _run(self, tmp_path, tiny_arch, toy_images, **kw):
        cfg = _toy_config(**kw)
        result = fit(_dataset(toy_images), cfg, tiny_arch, out_dir=tmp_path / "run")
        return cfg, result

    def test_resume_reproduces_uninterrupted_run(self, tmp_path, tiny_arch, toy_images):
        cfg, full = self._run(tmp_path, tiny_arch, toy_images, epochs=4)
        resumed = resume(full.checkpoint_paths[1], _dataset(toy_images))
        for ta, tb in zip(full.model.state_dict().values(),
                          resumed.model.state_dict().values()):
            assert torch.equal(ta, tb)
        tail = [r.losses for r in full.reports[2 * batches_per_epoch(20, 8):]]
        assert [r.losses for r in resumed.reports] == tail

    def test_resume_with_altered_batch_size_rejected(self, tmp_path, tiny_arch,
                                                     toy_images):
        cfg, full = self._run(tmp_path, tiny_arch, toy_images)
        altered = dataclasses.replace(cfg, batch_size=4)
        with pytest.raises(ConfigError, match="batch_size"):
            resume(full.checkpoint_paths[0], _dataset(toy_images), config=altered)

    def test_resume_from_final_epoch_is_noop(self, tmp_path, tiny_arch, toy_images):
        cfg, full = self._run(tmp_path, tiny_arch, toy_images)
        resumed = resume(full.checkpoint_paths[-1], _dataset(toy_images))
        assert resumed.reports == []
        for ta, tb in zip(full.model.state_dict().values(),
                          resumed.model.state_dict().values()):
            assert torch.equal(ta, tb)

    def test_checkpoint_schema(self, tmp_path, tiny_arch, toy_images):
        cfg, full = self._run(tmp_path, tiny_arch, toy_images)
        payload = load_checkpoint(full.checkpoint_paths[0])
        assert payload["epoch"] == 0
        assert payload["seed"] == cfg.seed
        assert json.loads(payload["arch"])["input_side"] == 16
        assert set(payload["momentum_buffers"]) == \
            {name for name, _ in full.model.named_parameters()}

    def test_corrupted_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_missing_field_named(self, tmp_path, tiny_arch, toy_images):
        cfg, full = self._run(tmp_path, tiny_arch, toy_images)
        payload = load_checkpoint(full.checkpoint_paths[0])
        del payload["spl_state"]
        stripped = tmp_path / "stripped.pt"
        torch.save(payload, stripped)
        with pytest.raises(CheckpointError, match="spl_state"):
            load_checkpoint(stripped)


class TestTrainingLog:
    def test_log_structure(self, tmp_path, tiny_arch, toy_images):
        cfg = _toy_config(epochs=2)
        result = fit(_dataset(toy_images), cfg, tiny_arch, out_dir=tmp_path)
        batches, epochs = read_log(result.log_path)
        per_epoch = batches_per_epoch(len(toy_images), cfg.batch_size)
        assert len(batches) == 2 * per_epoch
        assert len(epochs) == 2
        assert [b["step"] for b in batches] == list(range(2 * per_epoch))
        for b in batches:
            assert set(b) == {"step", "mu", "sigma", "lambda", "removed_count",
                              "weight_histogram"}
        for e in epochs:
            assert set(e) == {"epoch", "mean_loss", "lr", "wall_time_s"}
