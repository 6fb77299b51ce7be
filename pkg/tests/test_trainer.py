import numpy as np
import pytest

from vbranch import tensor as T
from vbranch.datapipe import generate_synthetic
from vbranch.errors import AffectedParamError, ConfigError, ModelError
from vbranch.trainer import (HISTORY_HEADER, Adam, Checkpoint, TrainConfig, lr_at, make_checkpoint,
                             model_from_checkpoint, new_model, region_for_branch, stream, train, write_history)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(8, 6, 3, 0.05, rng=np.random.default_rng(0))


def _cfg(**kw):
    base = dict(P=3, K=2, hidden=32, embed=16, epochs=1, steps_per_epoch=3)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    @pytest.mark.parametrize("t,expected", [(1, 3e-4), (50, 3e-4), (59, 3e-4), (60, 1.5e-4), (65, 1.5e-4),
                                            (70, 7.5e-5), (150, 3e-4 / 1024)])
    def test_full_scale_points(self, t, expected):
        assert lr_at(t, 3e-4, 50) == expected

    def test_non_increasing(self):
        lrs = [lr_at(t, 1.0, 10) for t in range(1, 200)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # bias correction makes the first step lr * sign(g)
        p = T.Parameter("w", np.array([1.0, -2.0]))
        p.value.grad = np.array([0.5, -3.0])
        Adam().step([p], 0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)

    def test_matches_hand_recursion(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
        p = T.Parameter("w", np.array([0.3]))
        opt = Adam(b1, b2, eps)
        w, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate([0.2, -0.1, 0.4], 1):
            p.value.grad = np.array([g])
            opt.step([p], lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert p.data[0] == pytest.approx(w, rel=1e-12)

    def test_non_finite_gradient_aborts_whole_step(self):
        a = T.Parameter("a", np.ones(2))
        b = T.Parameter("b", np.ones(2))
        a.value.grad = np.array([1.0, 1.0])
        b.value.grad = np.array([np.nan, 1.0])
        opt = Adam()
        with pytest.raises(AffectedParamError) as info:
            opt.step([a, b], 0.1)
        assert info.value.names == ["b"]
        np.testing.assert_array_equal(a.data, 1.0)
        assert opt.step_count == 0 and not opt.m


class TestConfig:
    def test_text_round_trip(self):
        from vbranch.config import parse_config_text

        cfg = _cfg(scheme="landmark", b=4, delta=0.25, seed=3)
        assert TrainConfig.from_mapping(parse_config_text(cfg.to_text())) == cfg

    @pytest.mark.parametrize("kw", [dict(scheme="nope"), dict(b=0), dict(delta=1.5), dict(m=0.0),
                                    dict(scheme="orientation", b=2), dict(lam=-1.0)])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            _cfg(**kw).validate()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_mapping({"gamma": "1"})

    def test_full_scale(self):
        c = TrainConfig.full_scale()
        assert (c.P, c.K, c.m, c.lam, c.hidden, c.t0) == (18, 4, 0.2, 0.2, 1024, 50)


def test_streams_are_independent():
    a = stream(0, "sampler").random(3)
    assert not np.array_equal(a, stream(0, "init").random(3))
    np.testing.assert_array_equal(a, stream(0, "sampler").random(3))


def test_region_mapping():
    assert [region_for_branch(i) for i in range(1, 5)] == ["neck", "hip", "ankle", None]


class TestTrain:
    @pytest.mark.parametrize("scheme,b", [("baseline", 1), ("baseline", 2), ("landmark", 3), ("landmark", 4),
                                          ("orientation", 3)])
    def test_runs_and_records_history(self, data, scheme, b):
        cfg = _cfg(scheme=scheme, b=b)
        res = train(new_model(cfg), data, cfg)
        assert len(res.history) == 3
        assert all(np.isfinite(r["total"]) for r in res.history)
        loc = [res.history[0][f"loc_{r}"] for r in ("neck", "hip", "ankle")]
        assert (min(loc) > 0) == (scheme == "landmark")

    def test_deterministic(self, data):
        cfg = _cfg(scheme="landmark", b=3, seed=4)
        a = train(new_model(cfg), data, cfg).checkpoint.to_bytes()
        b = train(new_model(cfg), data, cfg).checkpoint.to_bytes()
        assert a == b

    def test_loss_decreases(self, data):
        cfg = _cfg(steps_per_epoch=40)
        hist = train(new_model(cfg), data, cfg).history
        first = np.mean([r["triplet"] for r in hist[:5]])
        last = np.mean([r["triplet"] for r in hist[-5:]])
        assert last < first

    def test_branch_count_must_match(self, data):
        with pytest.raises(ConfigError):
            train(new_model(_cfg(b=2)), data, _cfg(b=3))

    def test_callback_sees_step_zero(self, data):
        seen = []
        cfg = _cfg()
        train(new_model(cfg), data, cfg, steps=2, callback=lambda s, m: seen.append(s))
        assert seen == [0, 1, 2]


class TestCheckpoint:
    def test_reload_gives_identical_embeddings(self, data, tmp_path):
        cfg = _cfg(scheme="landmark", b=3)
        res = train(new_model(cfg), data, cfg)
        res.checkpoint.save(tmp_path / "c.vbck")
        back = model_from_checkpoint(Checkpoint.load(tmp_path / "c.vbck"))
        x = T.Value(data.stack([r.sample_id for r in data.manifest.records[:4]]))
        np.testing.assert_array_equal(back.embed(x).data, res.model.embed(x).data)

    def test_moments_saved(self, data, tmp_path):
        cfg = _cfg()
        ck = train(new_model(cfg), data, cfg).checkpoint
        ck.save(tmp_path / "c.vbck")
        back = Checkpoint.load(tmp_path / "c.vbck")
        assert back.adam_step == 3 and back.epoch == 1
        assert back.moments.keys() == ck.moments.keys() and any(k.startswith("v/") for k in back.moments)

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"JUNKJUNK")
        with pytest.raises(ModelError):
            Checkpoint.load(tmp_path / "x")

    def test_config_survives(self):
        cfg = _cfg(b=2, delta=0.5)
        ck = make_checkpoint(new_model(cfg), cfg)
        assert ck.config() == cfg


def test_history_csv(tmp_path, data):
    cfg = _cfg()
    write_history(tmp_path / "h.csv", train(new_model(cfg), data, cfg, steps=2).history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_HEADER)
    assert len(lines) == 3
