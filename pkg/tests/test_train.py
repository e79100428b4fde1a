import math

import numpy as np
import pytest

import symbox.autodiff as ad
from symbox.errors import ConfigError, DatasetFormatError, InvalidArgumentError, VersionMismatchError
from symbox.geometry import OrientedBox, rotated_iou
from symbox.losses import LossWeights
from symbox.synth import SynthConfig, generate_dataset, generate_scene
from symbox.train import (
    CSV_COLUMNS,
    STRIDE,
    Adam,
    TinyModel,
    TrainConfig,
    assign,
    build_views,
    centerness_target,
    decode_boxes,
    detect_instability,
    grid_points,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
from symbox import views

CFG = SynthConfig()
SIZE = (128, 128)


def single(cx, cy, theta=0.3, kind="rectangle"):
    return generate_scene(CFG, 0, thetas=[theta], kinds=[kind], centers=[(cx, cy)])


def fixed_views(scene, R, config=TrainConfig()):
    vs = build_views(scene, np.random.default_rng(0), config)
    vs.transforms["rot"] = views.ViewTransform("rotate", R, config.padding)
    return vs


class TestConfig:
    def test_round_trip(self):
        c = TrainConfig(steps=10, weights=LossWeights(lambda_flp=0.0), coder="none")
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        d = TrainConfig().to_dict()
        d["bogus"] = 1
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(d)

    def test_ss_only_masks_box_terms(self):
        w = TrainConfig(ss_only=True).effective_weights
        assert w.mu_box == 0 and w.mu_cn == 0 and w.mu_ss == 1

    def test_invalid_choices(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(coder="gray")
        with pytest.raises(InvalidArgumentError):
            TrainConfig(box_loss="l1")


class TestGrid:
    def test_points(self):
        pts = grid_points((16, 16))
        assert pts.shape == (16, 2)
        assert tuple(pts[0]) == (1.5, 1.5) and tuple(pts[5]) == (5.5, 5.5)

    def test_centerness(self):
        b = OrientedBox(10, 10, 8, 4, 0.0)
        assert centerness_target(b, np.array([[10.0, 10.0]]))[0] == pytest.approx(1.0)
        assert centerness_target(b, np.array([[12.0, 10.0]]))[0] == pytest.approx(math.sqrt(2 / 6))

    def test_decode_boxes_centered(self):
        offs = ad.Tensor(np.array([[3.0, 1.0, 3.0, 1.0]]))
        b = decode_boxes(offs, np.array([0.4]), np.array([[5.0, 6.0]])).data[0]
        assert b == pytest.approx([5, 6, 6, 2, 0.4])

    def test_decode_boxes_offset_in_frame(self):
        offs = ad.Tensor(np.array([[1.0, 1.0, 3.0, 1.0]]))
        b = decode_boxes(offs, np.array([math.pi / 2]), np.array([[0.0, 0.0]])).data[0]
        assert b[:2] == pytest.approx([0.0, 1.0])


class TestAssign:
    @pytest.mark.parametrize("R", [math.pi / 4, math.pi / 2, 3 * math.pi / 4])
    def test_center_object_kept(self, R):
        vs = fixed_views(single(63.5, 63.5), R)
        batch = assign([vs], SIZE, TrainConfig())
        assert list(batch.matched) == [0]
        assert all(batch.ss_weights[k].shape[0] == 1 for k in ("orig", "flp", "rot"))

    def test_corner_object_dropped(self):
        vs = fixed_views(single(14.0, 14.0, 0.1), math.pi / 4)
        q = views.transform_point((14.0, 14.0), vs.transforms["rot"], SIZE)
        assert not views.inside_image(q, SIZE)
        batch = assign([vs], SIZE, TrainConfig())
        assert len(batch.matched) == 0 and batch.n_objects == 1
        assert len(batch.pos_index) > 0  # still a WS positive

    def test_one_of_two_matched(self):
        s = generate_scene(CFG, 0, thetas=[0.2, 1.0], kinds=["ellipse", "rectangle"],
                           centers=[(63.5, 63.5), (14.0, 14.0)])
        vs = fixed_views(s, math.pi / 4)
        batch = assign([vs], SIZE, TrainConfig())
        assert list(batch.matched) == [0]
        assert batch.ss_rotation == pytest.approx([math.pi / 4])

    def test_weights_average_within_radius(self):
        vs = fixed_views(single(63.5, 63.5), math.pi / 3)
        batch = assign([vs], SIZE, TrainConfig())
        pts = grid_points(SIZE)
        for name in ("orig", "flp", "rot"):
            row = batch.ss_weights[name][0]
            assert row.sum() == pytest.approx(1.0)
            q = views.transform_point((63.5, 63.5), vs.transforms[name], SIZE)
            d = np.hypot(*(pts[row > 0] - q).T)
            assert d.max() <= 1.5 * STRIDE + 1e-9

    def test_positives_inside_box_and_radius(self):
        s = generate_scene(CFG, 3)
        vs = fixed_views(s, 1.0)
        batch = assign([vs], SIZE, TrainConfig())
        pts = grid_points(SIZE)
        for j, box in zip(batch.pos_index, batch.pos_boxes):
            b = OrientedBox(*box)
            assert math.hypot(pts[j, 0] - b.cx, pts[j, 1] - b.cy) <= 1.5 * STRIDE + 1e-9
        assert batch.labels.sum() == len(batch.pos_index)
        assert np.all((batch.pos_centerness > 0) & (batch.pos_centerness <= 1))

    def test_batch_offsets(self):
        a, b = single(63.5, 63.5), single(40.0, 70.0)
        batch = assign([fixed_views(a, 1.0), fixed_views(b, 1.0)], SIZE, TrainConfig())
        n = len(grid_points(SIZE))
        second = batch.ss_weights["orig"][1]
        assert second[:n].sum() == 0 and second[n:].sum() == pytest.approx(1.0)

    def test_rr_gt_is_rotated_hbox(self):
        s = single(63.5, 63.5, 0.0)
        vs = build_views(s, np.random.default_rng(4), TrainConfig(rr_augment=True))
        (g,) = vs.gt_boxes
        h = s.objects[0].hbox
        assert g.w * g.h == pytest.approx(h.width * h.height)
        assert (g.cx, g.cy) == pytest.approx((63.5, 63.5))


class TestOptimizer:
    def test_schedule(self):
        p = ad.Tensor(np.zeros(1), True)
        opt = Adam([p], 1.0, warmup_steps=100, milestones=(0.75, 0.9), total_steps=1000)
        assert opt.lr_at(50) == pytest.approx(0.5)
        assert opt.lr_at(100) == 1.0
        assert opt.lr_at(751) == pytest.approx(0.1)
        assert opt.lr_at(901) == pytest.approx(0.01)

    def test_minimises_quadratic(self):
        p = ad.Tensor(np.array([3.0, -2.0]), True)
        opt = Adam([p], 0.1)
        for _ in range(500):
            p.grad = None
            ad.backward(ad.sum(p * p))
            opt.step([p.grad])
        assert np.abs(p.data).max() < 1e-2


class TestStep:
    def scenes(self):
        return generate_dataset(CFG, 4, 0)

    def run(self, config, steps=3):
        model = TinyModel(3, 8, seed=0)
        opt = Adam(model.parameters(), config.lr, warmup_steps=0)
        rng = np.random.default_rng(1)
        sc = self.scenes()
        return [train_step(sc[:2], model, opt, config, rng, i).parts for i in range(steps)], model

    def test_deterministic(self):
        a, _ = self.run(TrainConfig())
        b, _ = self.run(TrainConfig())
        assert a == b

    def test_three_forward_passes(self):
        _, model = self.run(TrainConfig(), steps=1)
        assert model.forward_calls == 3

    def test_multiplex_two_passes(self):
        _, model = self.run(TrainConfig(multiplex=True), steps=2)
        assert model.forward_calls == 4

    def test_mu_ss_zero(self):
        parts, _ = self.run(TrainConfig(weights=LossWeights(mu_ss=0.0)), steps=1)
        p = parts[0]
        assert p["total"] == pytest.approx(p["cls"] + p["cn"] + p["box"])

    def test_ss_only_total(self):
        parts, _ = self.run(TrainConfig(ss_only=True), steps=1)
        p = parts[0]
        assert p["total"] == pytest.approx(p["cls"] + 0.05 * p["flp"] + p["rot"])

    def test_coder_none_runs(self):
        parts, _ = self.run(TrainConfig(coder="none"), steps=2)
        assert all(math.isfinite(v) for v in parts[-1].values())

    def test_hbox_loss_runs(self):
        parts, _ = self.run(TrainConfig(box_loss="hbox_iou", rr_augment=True), steps=2)
        assert all(math.isfinite(v) for v in parts[-1].values())


class TestTrainLoop:
    def test_short_run_history(self):
        sc = generate_dataset(CFG, 4, 0)
        res = train(sc, TrainConfig(steps=4, width=8, val_limit=2), val_scenes=sc[:2])
        assert [r["epoch"] for r in res.history] == [1, 2]
        assert set(CSV_COLUMNS) <= set(res.history[0])
        assert len(res.step_losses) == 4

    def test_deterministic_trajectory(self):
        sc = generate_dataset(CFG, 4, 0)
        a = train(sc, TrainConfig(steps=3, width=8)).step_losses
        b = train(sc, TrainConfig(steps=3, width=8)).step_losses
        assert a == b

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            train([], TrainConfig(steps=1))

    def test_instability_flag(self):
        assert not detect_instability(list(np.linspace(2, 0.5, 400)))
        assert detect_instability(list(np.linspace(2, 0.5, 200)) + [3.0] * 200)


class TestInfer:
    def test_single_forward(self):
        model = TinyModel(3, 8)
        infer(generate_scene(CFG, 1).image, model)
        assert model.forward_calls == 1

    def test_blank_image(self):
        model = TinyModel(3, 8)
        assert infer(np.zeros((128, 128)), model) == []

    def test_threshold_zero_gives_sorted_boxes(self):
        model = TinyModel(3, 8)
        dets = infer(generate_scene(CFG, 1).image, model, score_threshold=0.0, top_k=20)
        scores = [s for _, s in dets]
        assert scores == sorted(scores, reverse=True)
        for i, (a, _) in enumerate(dets):
            for b, _ in dets[:i]:
                assert rotated_iou(a, b) <= 0.5


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = TinyModel(3, 8, seed=2)
        cfg = TrainConfig(steps=7, width=8)
        save_checkpoint(tmp_path / "m.ckpt", model, cfg)
        m2, c2, _ = load_checkpoint(tmp_path / "m.ckpt")
        assert c2 == cfg
        for k, v in model.state_arrays().items():
            np.testing.assert_array_equal(m2.params[k].data, v)

    def test_version_and_truncation(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, TinyModel(3, 8), TrainConfig(width=8))
        data = bytearray(p.read_bytes())
        p.write_bytes(bytes(data[:-10]))
        with pytest.raises(DatasetFormatError):
            load_checkpoint(p)
        data[8] = 77
        p.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(p)

    def test_missing_tensor(self):
        model = TinyModel(3, 8)
        arrays = model.state_arrays()
        arrays.pop("b3b.w")
        with pytest.raises(VersionMismatchError):
            model.load_arrays(arrays)
