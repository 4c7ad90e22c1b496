import json
from dataclasses import replace

import numpy as np
import pytest

from repquery.config import RunConfig, Splits, dump_config, load_config
from repquery.model import ConfigError, ModelConfig, QueryModel
from repquery.objective import LossWeights
from repquery.synth import GeneratorConfig, generate_split
from repquery.train import OptimConfig, _better, augment_batch, random_rotation, random_signed_permutation, train_model

GEN = GeneratorConfig(T=32, C_in=4, count_range=(1, 3), period_range=(4, 8))
MODEL = ModelConfig(T=32, C_in=4, C=8, heads=2, L_enc=1, L_dec=2, Q=4, W=4, ffn_mult=1, head_layers=2)


@pytest.fixture(scope="module")
def data():
    return generate_split(GEN, 6, 3, 0)


class TestOptimConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"lr": 0.0}, {"batch_size": 0}, {"epochs": -1}, {"weight_decay": -1.0}, {"grad_clip": 0.0}, {"augment": "jitter"}, {"warmup_steps": -1}, {"schedule": "step"}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            OptimConfig(**kw)

    def test_paper_values(self):
        p = OptimConfig.paper()
        assert (p.lr, p.batch_size, p.epochs) == (0.002, 64, 80)
        assert (p.augment, p.warmup_steps, p.schedule) == ("none", 0, "constant")

    def test_constant_schedule(self):
        o = OptimConfig(lr=0.01, warmup_steps=0, schedule="constant")
        assert o.lr_at(1, 100) == o.lr_at(100, 100) == 0.01

    def test_warmup_then_cosine(self):
        o = OptimConfig(lr=0.01, warmup_steps=10, schedule="cosine")
        assert o.lr_at(5, 110) == pytest.approx(0.005)
        assert o.lr_at(10, 110) == pytest.approx(0.01)
        assert o.lr_at(60, 110) == pytest.approx(0.01 * (0.1 + 0.9 * 0.5))
        assert o.lr_at(110, 110) == pytest.approx(0.001)
        lrs = [o.lr_at(s, 110) for s in range(10, 111)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestSelection:
    def test_obo_first_then_mae_then_later(self):
        assert _better(0.5, 0.3, None)
        assert _better(0.6, 0.9, (0.5, 0.1))
        assert not _better(0.4, 0.0, (0.5, 0.1))
        assert _better(0.5, 0.05, (0.5, 0.1))
        assert not _better(0.5, 0.2, (0.5, 0.1))
        assert _better(0.5, 0.1, (0.5, 0.1))


class TestAugmentation:
    def test_rotation_orthogonal(self):
        r = random_rotation(np.random.default_rng(0), 6)
        assert np.allclose(r @ r.T, np.eye(6), atol=1e-12)

    def test_signed_permutation(self):
        m = random_signed_permutation(np.random.default_rng(1), 5)
        assert np.array_equal(np.abs(m).sum(0), np.ones(5)) and np.array_equal(np.abs(m).sum(1), np.ones(5))
        assert np.allclose(m @ m.T, np.eye(5))

    @pytest.mark.parametrize("mode", ["rotate", "flip"])
    def test_reversal_mirrors_targets(self, data, mode):
        samples = data[0][:4]
        x = np.stack([s.features for s in samples]).astype(np.float64)
        rng = np.random.default_rng(3)
        out, targets = augment_batch(x, samples, MODEL.Q, rng, mode)
        for xi, s, t in zip(out, samples, targets):
            energy, orig = np.linalg.norm(xi, axis=1), np.linalg.norm(s.features.astype(np.float64), axis=1)
            flipped = np.allclose(energy, orig[::-1], atol=1e-6)
            assert flipped or np.allclose(energy, orig, atol=1e-6)
            expect = sorted(1 - c.midpoint for c in s.cycles) if flipped else [c.midpoint for c in s.cycles]
            assert np.allclose(t.midpoints[: s.true_count], expect)
            assert int((t.classes == 1).sum()) == s.true_count


class TestTrainModel:
    def test_zero_epochs(self, data):
        res = train_model(MODEL, LossWeights(), OptimConfig(epochs=0), data[0], data[1])
        fresh = QueryModel(MODEL, seed=0)
        assert res.log == [] and res.steps == 0
        assert all(np.array_equal(res.model.params[k].data, fresh.params[k].data) for k in fresh.params)

    @pytest.mark.parametrize("flags", [{"use_daq": False}, {"use_icl": False}, {"use_daq": False, "use_icl": False}])
    def test_ablations_train(self, data, flags):
        res = train_model(replace(MODEL, **flags), LossWeights(), OptimConfig(epochs=2, batch_size=3), data[0], data[1])
        assert len(res.log) == 2 and all(np.isfinite(r["total"]) for r in res.log)
        if not flags.get("use_icl", True):
            assert all(r["contrastive"] == 0.0 for r in res.log)

    def test_best_epoch_recorded(self, data):
        res = train_model(MODEL, LossWeights(), OptimConfig(epochs=3, batch_size=3), data[0], data[1])
        rows = res.log
        assert 1 <= res.best_epoch <= 3
        best = rows[res.best_epoch - 1]
        assert (best["val_obo"], best["val_mae"]) == res.best_val
        assert all(_better(best["val_obo"], best["val_mae"], (r["val_obo"], r["val_mae"])) for r in rows)
        assert res.steps == 3 * 2

    def test_deterministic(self, data):
        a = train_model(MODEL, LossWeights(), OptimConfig(epochs=2, batch_size=3), data[0], data[1])
        b = train_model(MODEL, LossWeights(), OptimConfig(epochs=2, batch_size=3), data[0], data[1])
        assert a.log == b.log
        assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)

    def test_selects_on_train_without_val(self, data):
        res = train_model(MODEL, LossWeights(), OptimConfig(epochs=1, batch_size=3), data[0])
        assert "val_obo" in res.log[0]

    def test_width_mismatch(self, data):
        with pytest.raises(ConfigError):
            train_model(replace(MODEL, C_in=5), LossWeights(), OptimConfig(epochs=1), data[0])

    def test_too_many_cycles(self, data):
        many = [s for s in data[0] if s.true_count >= 2]
        with pytest.raises(ConfigError):
            train_model(replace(MODEL, Q=1), LossWeights(), OptimConfig(epochs=1), many)


class TestRunConfig:
    def test_presets(self):
        assert RunConfig.preset("paper").optim == OptimConfig.paper()
        over = RunConfig.preset("overfit")
        assert over.optim.epochs == 500 and over.splits.train == 8 and over.optim.augment == "none"
        with pytest.raises(ConfigError):
            RunConfig.preset("huge")

    def test_desk_defaults(self):
        cfg = RunConfig.preset("desk")
        assert (cfg.optim.lr, cfg.optim.batch_size, cfg.optim.epochs) == (1e-3, 8, 200)
        assert (cfg.optim.augment, cfg.optim.warmup_steps, cfg.optim.schedule) == ("flip", 200, "cosine")
        assert (cfg.splits.train, cfg.splits.val, cfg.splits.test) == (200, 50, 50)

    def test_round_trip(self):
        cfg = RunConfig.preset("desk").with_seed(5)
        back = RunConfig.from_dict(json.loads(dump_config(cfg)))
        assert back == cfg

    def test_width_mismatch(self):
        with pytest.raises(ConfigError) as err:
            RunConfig(model=ModelConfig(C_in=8))
        assert err.value.field == "model.C_in"

    def test_count_exceeds_queries(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model": {"Q": 8}})

    @pytest.mark.parametrize(
        "data, field",
        [
            ({"optim": {"lr": -1}}, "optim.lr"),
            ({"optim": {"momentum": 0.9}}, "optim.momentum"),
            ({"extra": {}}, "extra"),
            ({"generator": {"count_range": [2, 40]}}, "generator.count_range"),
            ({"splits": {"train": 0}}, "splits.train"),
        ],
    )
    def test_field_named(self, data, field):
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict(data)
        assert err.value.field.endswith(field.split(".", 1)[-1])

    def test_load_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"preset": "overfit", "optim": {"epochs": 3}}))
        cfg = load_config(path)
        assert cfg.optim.epochs == 3 and cfg.splits.train == 8

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{oops")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_seed_applies_to_both(self):
        cfg = RunConfig().with_seed(9)
        assert cfg.optim.seed == 9 and cfg.generator.master_seed == 9

    def test_loss_weights_overlay(self):
        cfg = RunConfig.from_dict({"loss": {"l1": 2.0, "contrastive": 0.5}})
        assert cfg.loss.position.l1 == 2.0 and cfg.loss.contrastive == 0.5

    def test_splits(self):
        with pytest.raises(ConfigError):
            Splits(train=0)
