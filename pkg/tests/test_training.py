from dataclasses import replace

import numpy as np
import pytest

from multinet.data_io import Sample, SyntheticConfig, generate_synthetic
from multinet.det_decoder import BoundingBox, GridGeometry, assign_cells
from multinet.model import MultiNet
from multinet.training import (
    Adam,
    BadMagicCheckpointError,
    Checkpoint,
    CheckpointShapeError,
    CheckpointVersionError,
    NonFiniteLossError,
    TrainConfig,
    TruncatedCheckpointError,
    accumulate_gradients,
    adam_update,
    adjust_brightness,
    apply_overrides,
    augment,
    batch_indices,
    flip_sample,
    joint_step,
    load_checkpoint,
    parse_config_text,
    rescale_and_crop,
    save_checkpoint,
    task_batches,
    task_loss,
    train,
)
from multinet.rng import make_rng

from conftest import tiny_config

SMALL = SyntheticConfig(width=96, height=64, min_vehicle=8, max_vehicle=24)
NO_AUG = dict(augment_seg=False, augment_det=False, augment_cls=False)


@pytest.fixture
def samples():
    return generate_synthetic(6, 1, SMALL)


def datasets(samples):
    return {"seg": samples, "det": samples, "cls": samples}


class TestAdam:
    def test_zero_gradient_is_no_op(self):
        p = np.array([1.0, -2.0])
        adam_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=1e-3)
        assert p.tolist() == [1.0, -2.0]

    def test_first_step_closed_form(self):
        p = np.zeros(3)
        adam_update(p, np.ones(3), np.zeros(3), np.zeros(3), 1, lr=1e-3, eps=1e-8)
        np.testing.assert_allclose(p, -1e-3 / (1 + 1e-8), rtol=1e-12)

    def test_weight_decay_shrinks_norm(self):
        p = np.array([3.0, -4.0])
        m, v = np.zeros(2), np.zeros(2)
        norms = []
        for t in range(1, 20):
            adam_update(p, np.zeros(2), m, v, t, lr=0.1, weight_decay=0.5)
            norms.append(np.linalg.norm(p))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_step_counter_starts_at_one(self):
        with pytest.raises(ValueError):
            adam_update(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0, lr=1e-3)

    def test_biases_are_not_decayed(self):
        model = MultiNet(tiny_config(), seed=0)
        model.params["seg.score.bias"].data[...] = 1.0
        before = model.params["seg.score.weight"].data.copy()
        opt = Adam(model.params, lr=0.1, weight_decay=0.5)
        opt.step(model.params)
        assert np.all(model.params["seg.score.bias"].data == 1.0)
        assert np.all(np.abs(model.params["seg.score.weight"].data) < np.abs(before) + 1e-12)


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(dropout_p=1.0)
        with pytest.raises(ValueError):
            TrainConfig(weight_decay=-1)

    def test_parse_and_override(self):
        text = ("# comment\nlearning_rate = 1e-5  # slow setting\nseg_batch=4\n"
                "augment_cls = false\nencoder.input_w = 128\n")
        train_cfg, net = apply_overrides(TrainConfig(), tiny_config(), parse_config_text(text))
        assert train_cfg.learning_rate == 1e-5 and train_cfg.seg_batch == 4 and not train_cfg.augment_cls
        assert net.encoder.input_w == 128

    def test_unknown_key(self):
        with pytest.raises(KeyError, match="bogus"):
            apply_overrides(TrainConfig(), tiny_config(), {"bogus": "1"})

    def test_malformed_line(self):
        with pytest.raises(ValueError, match="line 1"):
            parse_config_text("no equals sign")


class TestBatching:
    def test_every_sample_once_per_epoch(self):
        seen = sorted(i for step in range(3) for i in batch_indices(6, 2, step, 0, "seg"))
        assert seen == list(range(6))

    def test_tasks_cycle_independently(self):
        seg = [batch_indices(6, 2, s, 0, "seg") for s in range(3)]
        cls = [batch_indices(6, 2, s, 0, "cls") for s in range(3)]
        assert seg != cls

    def test_per_task_batch_sizes(self, samples):
        cfg = TrainConfig(seg_batch=1, det_batch=2, cls_batch=3, **NO_AUG)
        b = task_batches(datasets(samples), cfg, 0, np.float64)
        assert [b[t].images.shape[0] for t in ("seg", "det", "cls")] == [1, 2, 3]


class TestJointStep:
    def test_only_segmentation_leaves_other_decoders_untouched(self, samples):
        model = MultiNet(tiny_config(), seed=0)
        cfg = TrainConfig(tasks=("seg",), **NO_AUG)
        accumulate_gradients(model, task_batches({"seg": samples}, cfg, 0, np.float64), cfg, 0)
        for name, p in model.params.items():
            if name.startswith(("det.", "cls.")):
                assert p.grad is None or not p.grad.any(), name
        assert model.params["encoder.conv1.weight"].grad.any()

    def test_report_total_is_sum(self, samples):
        model = MultiNet(tiny_config(), seed=0)
        cfg = TrainConfig(**NO_AUG)
        opt = Adam.from_config(model.params, cfg)
        rep = joint_step(model, opt, task_batches(datasets(samples), cfg, 0, np.float64), cfg, 0)
        assert set(rep.losses) == {"seg", "det", "cls"}
        assert rep.total == sum(rep.losses.values())
        assert rep.format().startswith("step=1 seg=")
        assert "wall_ms" not in rep.format() and "wall_ms" in rep.format(with_timing=True)

    def test_shared_encoder_gradient_is_task_sum(self, samples):
        cfg = TrainConfig(**NO_AUG)
        batches = task_batches(datasets(samples), cfg, 0, np.float64)
        joint = MultiNet(tiny_config(), seed=0)
        accumulate_gradients(joint, batches, cfg, 0)
        parts = []
        for task in ("seg", "det", "cls"):
            single = MultiNet(tiny_config(), seed=0)
            accumulate_gradients(single, {task: batches[task]}, cfg, 0)
            parts.append(single)
        for name in joint.names("encoder"):
            total = sum(p.params[name].grad for p in parts)
            np.testing.assert_allclose(joint.params[name].grad, total, rtol=0, atol=1e-10)

    def test_bit_identical_after_ten_steps(self, samples):
        cfg = TrainConfig(seed=4)
        runs = []
        for _ in range(2):
            model = MultiNet(tiny_config(), seed=0)
            train(model, datasets(samples), cfg, steps=10)
            runs.append(model.state_dict())
        assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])

    def test_non_finite_loss_preserves_state(self, samples):
        model = MultiNet(tiny_config(), seed=0)
        cfg = TrainConfig(**NO_AUG)
        opt = Adam.from_config(model.params, cfg)
        batches = task_batches(datasets(samples), cfg, 0, np.float64)
        batches["cls"].images[0, 0, 0, 0] = np.nan
        before = {k: v.copy() for k, v in model.state_dict().items()}
        with pytest.raises(NonFiniteLossError, match="cls"):
            joint_step(model, opt, batches, cfg, 0)
        assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
        assert opt.t == 0 and all(p.grad is None for p in model.params.values())

    def test_needs_a_batch(self):
        with pytest.raises(ValueError):
            accumulate_gradients(MultiNet(tiny_config()), {}, TrainConfig(), 0)


def plain_sample(boxes, dont_care=()):
    img = np.random.default_rng(0).random((64, 96, 3)).astype(np.float32)
    mask = np.zeros((64, 96), np.uint8)
    mask[32:, 10:70] = 1
    return Sample(img, mask, list(boxes), list(dont_care))


class TestAugment:
    def test_flip_twice_is_identity(self, samples):
        s = samples[0]
        back = flip_sample(flip_sample(s))
        np.testing.assert_array_equal(back.image, s.image)
        np.testing.assert_array_equal(back.seg_mask, s.seg_mask)
        for a, b in zip(back.boxes, s.boxes):
            assert abs(a.x - b.x) < 1e-9 and abs(a.y - b.y) < 1e-9

    def test_brightness_on_constant(self):
        s = plain_sample([])
        s = replace(s, image=np.full_like(s.image, 0.4))
        np.testing.assert_allclose(adjust_brightness(s, 0.1).image, 0.5, atol=1e-6)

    def test_flipped_assignment_mirrors_original(self):
        grid = GridGeometry(2, 3)
        rng = np.random.default_rng(0)
        for _ in range(100):
            boxes = [BoundingBox(rng.uniform(5, 91), rng.uniform(5, 59), rng.uniform(4, 40), rng.uniform(4, 30))
                     for _ in range(3)]
            s = plain_sample(boxes, [(0.0, 0.0, 20.0, 10.0)])
            f = flip_sample(s)
            assert [b.x for b in f.boxes] == pytest.approx([96 - b.x for b in boxes])
            a, b = assign_cells(s.boxes, s.dont_care, grid), assign_cells(f.boxes, f.dont_care, grid)
            np.testing.assert_array_equal(b.positive, a.positive[:, ::-1])
            np.testing.assert_array_equal(b.dont_care, a.dont_care[:, ::-1])
            mirrored = a.targets[:, :, ::-1] * np.array([-1, 1, 1, 1])[:, None, None]
            np.testing.assert_allclose(b.targets, mirrored, atol=1e-12)

    def test_augment_keeps_size_and_consistency(self, samples):
        for i, s in enumerate(samples):
            for task in ("seg", "det", "cls"):
                a = augment(s, task, make_rng(0, "t", i))
                assert a.image.shape == s.image.shape and a.seg_mask.shape == s.seg_mask.shape
                assert set(np.unique(a.seg_mask)) <= {0, 1}
                for b in a.boxes:
                    x1, y1, x2, y2 = b.corners
                    assert 0 <= x1 < x2 <= 96 and 0 <= y1 < y2 <= 64

    def test_mostly_hidden_box_dropped(self):
        s = plain_sample([BoundingBox.from_corners(0, 10, 16, 20), BoundingBox.from_corners(40, 10, 60, 20)])
        # moving the window 10 px right keeps 6/16 of the first box, 14 px keeps 2/16
        assert len(rescale_and_crop(s, 1.0, (0, 10)).boxes) == 2
        assert len(rescale_and_crop(s, 1.0, (0, 14)).boxes) == 1

    def test_identity_resize(self):
        s = plain_sample([BoundingBox.from_corners(10, 10, 30, 20)])
        out = rescale_and_crop(s, 1.0, (0, 0))
        np.testing.assert_allclose(out.image, s.image, atol=1e-6)
        np.testing.assert_array_equal(out.seg_mask, s.seg_mask)
        assert out.boxes[0].corners == (10, 10, 30, 20)


class TestCheckpoint:
    def _trained(self, samples, steps=2):
        model = MultiNet(tiny_config(), seed=0)
        cfg = TrainConfig(**NO_AUG)
        opt, _ = train(model, datasets(samples), cfg, steps=steps)
        return model, opt, cfg

    def _saved(self, samples, path):
        model, opt, cfg = self._trained(samples, 0)
        save_checkpoint(path, Checkpoint.capture(model, opt, 0, cfg))
        return path

    def test_save_load_save_identical(self, samples, tmp_path):
        model, opt, cfg = self._trained(samples)
        save_checkpoint(tmp_path / "a", Checkpoint.capture(model, opt, 2, cfg))
        save_checkpoint(tmp_path / "b", load_checkpoint(tmp_path / "a"))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_reload_gives_same_loss_and_continuation(self, samples, tmp_path):
        model = MultiNet(tiny_config(dtype="float32"), seed=0)
        cfg = TrainConfig(**NO_AUG)
        opt, _ = train(model, datasets(samples), cfg, steps=2)
        save_checkpoint(tmp_path / "c", Checkpoint.capture(model, opt, 2, cfg))
        ck = load_checkpoint(tmp_path / "c")
        fresh = MultiNet(tiny_config(dtype="float32"), seed=9)
        fresh_opt = Adam.from_config(fresh.params, cfg)
        ck.restore(fresh, fresh_opt)
        assert ck.step == 2 and fresh_opt.t == 2
        batch = task_batches(datasets(samples), cfg, 5, np.float32)["seg"]
        a = task_loss(model, "seg", batch, cfg, 5, training=False).item()
        b = task_loss(fresh, "seg", batch, cfg, 5, training=False).item()
        assert a == b
        train(model, datasets(samples), cfg, opt, start_step=2, steps=1)
        train(fresh, datasets(samples), cfg, fresh_opt, start_step=2, steps=1)
        assert all(model.params[k].data.tobytes() == fresh.params[k].data.tobytes() for k in model.params)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"HELLO\n")
        with pytest.raises(BadMagicCheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_version(self, samples, tmp_path):
        path = self._saved(samples, tmp_path / "x")
        path.write_bytes(path.read_bytes().replace(b"MNET1", b"MNET2", 1))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_truncated(self, samples, tmp_path):
        path = self._saved(samples, tmp_path / "x")
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_shape_mismatch(self, samples, tmp_path):
        path = self._saved(samples, tmp_path / "x")
        other = MultiNet(tiny_config(bottleneck=9), seed=0)
        with pytest.raises(CheckpointShapeError, match="det.bottleneck"):
            load_checkpoint(path).restore(other)

    def test_distinct_error_types(self):
        kinds = [BadMagicCheckpointError, CheckpointVersionError, TruncatedCheckpointError, CheckpointShapeError]
        assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)
