import math

import numpy as np
import pytest

from rmaff_ps import engine as E
from rmaff_ps import train as T
from rmaff_ps.checkpoint import best_stem, load_checkpoint
from rmaff_ps.core import NormalMap, Rng
from rmaff_ps.errors import ConfigError, InputError, TrainingError
from rmaff_ps.network import build_network
from rmaff_ps.render import random_scene_spec, render_scene, ring_lights
from rmaff_ps.settings import TrainConfig


def uniform_map(normal, h=2, w=2):
    return NormalMap(np.tile(np.asarray(normal, dtype=float), (h, w, 1)), np.ones((h, w), bool))


@pytest.fixture
def scenes():
    lights = ring_lights(8, 35.0)
    return [render_scene(random_scene_spec(Rng(11).split(i), 16, 16, noise_sigma=0.0), lights) for i in range(3)]


@pytest.fixture
def quick_cfg(tiny_cfg):
    return tiny_cfg.model_copy(update={"train": tiny_cfg.train.model_copy(update={"batches_per_epoch": 2})})


class TestLearningRate:
    cfg = TrainConfig()

    def test_halves_every_five_epochs(self):
        assert T.lr_at(0, self.cfg) == 0.001
        assert T.lr_at(4, self.cfg) == 0.001
        assert T.lr_at(5, self.cfg) == 0.0005
        assert T.lr_at(29, self.cfg) == pytest.approx(3.125e-5, rel=1e-12)

    def test_non_increasing(self):
        rates = [T.lr_at(e, self.cfg) for e in range(40)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(InputError):
            T.lr_at(-1, self.cfg)


class TestCosineLoss:
    def test_equal_normals(self):
        assert T.cosine_loss(uniform_map([0.0, 0.0, 1.0]), uniform_map([0.0, 0.0, 1.0])) == 0.0

    def test_perpendicular_normals(self):
        assert T.cosine_loss(uniform_map([1.0, 0.0, 0.0]), uniform_map([0.0, 0.0, 1.0])) == pytest.approx(1.0)

    def test_antipodal_normals(self):
        assert T.cosine_loss(uniform_map([0.0, 0.0, -1.0]), uniform_map([0.0, 0.0, 1.0])) == pytest.approx(2.0)

    def test_bounded_for_random_pairs(self):
        gen = np.random.default_rng(5)
        a = NormalMap.from_field(gen.normal(size=(100, 1000, 3)))
        b = NormalMap.from_field(gen.normal(size=(100, 1000, 3)))
        assert 0.0 <= T.cosine_loss(a, b) <= 2.0
        assert T.cosine_loss(a, NormalMap(-a.normals, a.mask)) <= 2.0
        for r, c in zip(gen.integers(0, 100, 200), gen.integers(0, 1000, 200)):
            assert 0.0 <= T.cosine_loss(a.crop(r, c, 1, 1), b.crop(r, c, 1, 1)) <= 2.0

    def test_disjoint_masks_rejected(self):
        a = NormalMap(np.tile([0.0, 0.0, 1.0], (2, 2, 1)), np.array([[True, False], [False, False]]))
        b = NormalMap(np.tile([0.0, 0.0, 1.0], (2, 2, 1)), np.array([[False, True], [True, True]]))
        with pytest.raises(InputError):
            T.cosine_loss(a, b)


class TestBatches:
    def test_same_rng_same_batch(self, scenes, tiny_cfg):
        a = T.make_batch(scenes, T.batch_rng(3, 0, 1), tiny_cfg.train)
        b = T.make_batch(scenes, T.batch_rng(3, 0, 1), tiny_cfg.train)
        assert a.origins == b.origins
        np.testing.assert_array_equal(a.light_indices, b.light_indices)

    def test_different_index_different_batch(self, scenes, tiny_cfg):
        cfg = tiny_cfg.train.model_copy(update={"batch_size": 8})
        a = T.make_batch(scenes, T.batch_rng(3, 0, 1), cfg)
        b = T.make_batch(scenes, T.batch_rng(3, 0, 2), cfg)
        assert a.origins != b.origins

    def test_crops_stay_inside(self, scenes, tiny_cfg):
        cfg = tiny_cfg.train.model_copy(update={"batch_size": 50})
        batch = T.make_batch(scenes, Rng(0), cfg)
        for (index, row, col), (stack, gt) in zip(batch.origins, batch.samples):
            assert 0 <= index < len(scenes)
            assert 0 <= row <= 16 - cfg.patch and 0 <= col <= 16 - cfg.patch
            assert stack.images.shape == (cfg.lights_per_sample, cfg.patch, cfg.patch, 3)
            assert gt.normals.shape == (cfg.patch, cfg.patch, 3)

    def test_lights_drawn_without_replacement(self, scenes, tiny_cfg):
        batch = T.make_batch(scenes, Rng(0), tiny_cfg.train.model_copy(update={"batch_size": 20}))
        for row in batch.light_indices:
            assert len(set(row.tolist())) == len(row)

    def test_light_frequency_is_uniform(self, scenes, tiny_cfg):
        n, m, k = 400, 8, 4
        cfg = tiny_cfg.train.model_copy(update={"batch_size": n, "lights_per_sample": k})
        counts = np.bincount(T.make_batch(scenes, Rng(5), cfg).light_indices.ravel(), minlength=m)
        expected = n * k / m
        sigma = math.sqrt(n * (k / m) * (1 - k / m))
        assert np.all(np.abs(counts - expected) < 3 * sigma)

    def test_light_shortfall_uses_all(self, scenes, tiny_cfg):
        cfg = tiny_cfg.train.model_copy(update={"lights_per_sample": 20})
        batch = T.make_batch(scenes, Rng(0), cfg)
        assert batch.light_indices.shape == (cfg.batch_size, 8)

    def test_patch_larger_than_scene_rejected(self, scenes, tiny_cfg):
        with pytest.raises(InputError, match="patch"):
            T.make_batch(scenes, Rng(0), tiny_cfg.train.model_copy(update={"patch": 32}))

    def test_arrays_layout(self, scenes, tiny_cfg):
        batch = T.make_batch(scenes, Rng(0), tiny_cfg.train)
        images, lights, target, mask = batch.arrays(3, np.float64)
        assert images.shape == (2, 4, 3, 8, 8)
        assert lights.shape == (2, 4, 3)
        assert target.shape == (2, 3, 8, 8)
        assert mask.shape == (2, 8, 8) and mask.dtype == bool

    def test_batches_per_epoch(self, scenes, tiny_cfg):
        assert T.batches_per_epoch(scenes, tiny_cfg.train) == 6
        assert T.batches_per_epoch(scenes, tiny_cfg.train.model_copy(update={"batches_per_epoch": 3})) == 3

    def test_prefetch_gives_same_batches(self, scenes, tiny_cfg):
        serial = list(T.iter_batches(scenes, tiny_cfg.train, 1, 3, prefetch=False))
        ahead = list(T.iter_batches(scenes, tiny_cfg.train, 1, 3, prefetch=True))
        assert [b.origins for b in serial] == [b.origins for b in ahead]


class TestSplit:
    def test_holds_out_fraction(self):
        train, val = T.split_dataset(list(range(10)), 0.2, Rng(0))
        assert len(val) == 2 and len(train) == 8
        assert not set(train) & set(val)

    def test_deterministic(self):
        assert T.split_dataset(list(range(10)), 0.3, Rng(4)) == T.split_dataset(list(range(10)), 0.3, Rng(4))

    def test_at_least_one_held_out(self):
        train, val = T.split_dataset(list(range(5)), 0.01, Rng(0))
        assert len(val) == 1 and len(train) == 4

    def test_single_scene_validates_on_itself(self):
        assert T.split_dataset(["a"], 0.5, Rng(0)) == (["a"], ["a"])


class TestOptimizers:
    def test_zero_lr_leaves_params_untouched(self, scenes, tiny_cfg):
        for kind in ("adam", "sgd"):
            tcfg = tiny_cfg.train.model_copy(update={"optimizer": kind})
            net = build_network(tiny_cfg.network, Rng(0))
            before = {name: p.data.tobytes() for name, p in net.named_parameters()}
            T.train_step(net, T.make_optimizer(net, tcfg), T.make_batch(scenes, Rng(1), tcfg), 0.0)
            assert {name: p.data.tobytes() for name, p in net.named_parameters()} == before

    def test_adam_state_round_trip(self, tiny_cfg, scenes):
        net = build_network(tiny_cfg.network, Rng(0))
        opt = T.make_optimizer(net, tiny_cfg.train)
        T.train_step(net, opt, T.make_batch(scenes, Rng(1), tiny_cfg.train), 1e-3)
        other = T.make_optimizer(net, tiny_cfg.train)
        other.load_state_dict(opt.state_dict())
        assert other.t == 1
        for name in opt.m:
            np.testing.assert_array_equal(other.m[name], opt.m[name])

    def test_repeated_steps_lower_the_loss(self, tiny_cfg, scenes):
        net = build_network(tiny_cfg.network, Rng(0))
        opt = T.make_optimizer(net, tiny_cfg.train)
        batch = T.make_batch(scenes, Rng(1), tiny_cfg.train)
        first = T.train_step(net, opt, batch, 1e-3)
        for _ in range(15):
            last = T.train_step(net, opt, batch, 1e-3)
        assert last < first


class TestTrainStep:
    def test_nan_loss_names_the_batch(self, tiny_cfg, scenes, monkeypatch):
        original = E.cosine_loss_tensor
        monkeypatch.setattr(E, "cosine_loss_tensor", lambda *a: E.scale(original(*a), float("nan")))
        net = build_network(tiny_cfg.network, Rng(0))
        with pytest.raises(TrainingError) as info:
            T.train_step(net, T.make_optimizer(net, tiny_cfg.train), T.make_batch(scenes, Rng(1), tiny_cfg.train), 1e-3, "3:7")
        assert info.value.batch_id == "3:7"


class TestFit:
    def test_writes_log_checkpoints_and_best(self, scenes, quick_cfg, tmp_path):
        seen = []
        best = T.fit(scenes[:2], scenes[2:], quick_cfg, tmp_path, on_epoch=lambda *args: seen.append(args))
        lines = (tmp_path / T.LOG_FILE).read_text().splitlines()
        assert lines[0] == T.LOG_HEADER
        assert len(lines) == 1 + quick_cfg.train.epochs
        assert [epoch for epoch, _, _ in seen] == [0, 1]
        assert (tmp_path / "epoch_000.bin").exists() and (tmp_path / "epoch_001.manifest").exists()
        assert best_stem(tmp_path) == "epoch_{:03d}".format(best.epoch)
        assert best.val_mae == min(val for _, _, val in seen)

    def test_resume_matches_uninterrupted_run(self, scenes, quick_cfg, tmp_path):
        straight = tmp_path / "straight"
        T.fit(scenes[:2], scenes[2:], quick_cfg, straight, deterministic=True)
        split = tmp_path / "split"
        T.fit(scenes[:2], scenes[2:], quick_cfg, split, stop_after=1, deterministic=True)
        T.fit(scenes[:2], scenes[2:], quick_cfg, split, resume=split / "epoch_000", deterministic=True)
        a = load_checkpoint(straight / "epoch_001")
        b = load_checkpoint(split / "epoch_001")
        for name, value in a.params.items():
            assert value.tobytes() == b.params[name].tobytes(), name
        assert (straight / T.LOG_FILE).read_text() == (split / T.LOG_FILE).read_text()

    def test_checkpoint_records_batch_stream_position(self, scenes, quick_cfg, tmp_path):
        T.fit(scenes[:2], scenes[2:], quick_cfg, tmp_path, stop_after=1, deterministic=True)
        stored = load_checkpoint(tmp_path / "epoch_000").rng_state
        assert stored == {"seed": quick_cfg.train.seed, "next_epoch": 1}

    def test_resume_with_another_seed_rejected(self, scenes, quick_cfg, tmp_path):
        T.fit(scenes[:2], scenes[2:], quick_cfg, tmp_path, stop_after=1, deterministic=True)
        reseeded = quick_cfg.model_copy(update={"train": quick_cfg.train.model_copy(update={"seed": quick_cfg.train.seed + 1})})
        with pytest.raises(ConfigError, match="seed"):
            T.fit(scenes[:2], scenes[2:], reseeded, tmp_path, resume=tmp_path / "epoch_000", deterministic=True)

    def test_empty_training_set_rejected(self, scenes, quick_cfg):
        with pytest.raises(InputError):
            T.fit([], scenes, quick_cfg)

    def test_named_scenes_accepted(self, scenes, quick_cfg):
        cfg = quick_cfg.model_copy(update={"train": quick_cfg.train.model_copy(update={"epochs": 1})})
        named = [("s{}".format(i), stack, gt) for i, (stack, gt) in enumerate(scenes)]
        assert T.fit(named[:2], named[2:], cfg).epoch == 0


@pytest.mark.slow
def test_overfits_a_single_scene(tiny_cfg):
    scene = render_scene(random_scene_spec(Rng(2), 16, 16, noise_sigma=0.0), ring_lights(8, 35.0))
    cfg = tiny_cfg.train.model_copy(update={"batch_size": 4, "lights_per_sample": 8})
    net = build_network(tiny_cfg.network, Rng(0))
    opt = T.make_optimizer(net, cfg)
    batch = T.make_batch([scene], Rng(1), cfg)
    for _ in range(300):
        loss = T.train_step(net, opt, batch, 1e-3)
    assert loss < 0.05
