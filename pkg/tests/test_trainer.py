import numpy as np
import pytest

from fndecomp.data import CohortSpec, Volume4D, generate_cohort
from fndecomp.model import ModelConfig, init_params
from fndecomp.trainer import (
    AdamState, CheckpointError, NonFiniteGradientError, TrainConfig, TrainingHalted, adam_step,
    load_checkpoint, loss_and_grads, prepare_subjects, read_trace, save_checkpoint, subject_at, train,
    write_trace,
)

SMALL = ModelConfig(channels=3, n_networks=3, enc_width=4, down_widths=(4, 4, 4), up_widths=(4, 4, 4),
                    post_widths=(4, 4))


def _volumes(n=3, seed=0, T=6):
    rng = np.random.default_rng(seed)
    return [Volume4D(rng.normal(size=(8, 8, 8, T)).astype(np.float32)) for _ in range(n)]


class TestAdam:
    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-4])
    def test_first_step_magnitude(self, g):
        p = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.full(2, g)}
        lr = 1e-3
        new, state = adam_step(p, grads, AdamState.zeros_like(p), lr)
        delta = new["w"] - p["w"]
        assert np.all(np.sign(delta) == -np.sign(g))
        assert np.all((np.abs(delta) >= 0.99 * lr) & (np.abs(delta) <= lr))
        assert state.step == 1

    def test_zero_gradient(self):
        p = {"w": np.arange(3.0)}
        new, state = adam_step(p, {"w": np.zeros(3)}, AdamState.zeros_like(p), 0.1)
        assert np.array_equal(new["w"], p["w"]) and state.step == 1

    def test_quadratic(self):
        p = {"x": np.array(1.0)}
        state = AdamState.zeros_like(p)
        for _ in range(100):
            p, state = adam_step(p, {"x": 2 * p["x"]}, state, 0.1)
        assert abs(float(p["x"])) < 0.2

    def test_matches_reference_recurrence(self):
        # scalar Adam written out longhand
        x, m, v = 0.5, 0.0, 0.0
        p = {"x": np.array(x)}
        state = AdamState.zeros_like(p)
        for t in range(1, 6):
            g = np.cos(x) + x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            p, state = adam_step(p, {"x": np.cos(p["x"]) + p["x"]}, state, 0.01)
        assert abs(float(p["x"]) - x) < 1e-12

    def test_nonfinite_gradient_names_layer(self):
        p = {"a": np.zeros(2), "b": np.zeros(2)}
        with pytest.raises(NonFiniteGradientError, match="b") as info:
            adam_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, AdamState.zeros_like(p), 0.1)
        assert info.value.layers == ["b"]


class TestConfig:
    @pytest.mark.parametrize("bad", [{"lr": 0}, {"iterations": 0}, {"lam": -1.0}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_roundtrip(self):
        cfg = TrainConfig(lam=0.01, iterations=7, seed=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestSampling:
    def test_each_epoch_is_a_permutation(self):
        n = 7
        for epoch in range(3):
            seen = [subject_at(epoch * n + i, n, seed=1) for i in range(n)]
            assert sorted(seen) == list(range(n))

    def test_epochs_reshuffle(self):
        orders = {tuple(subject_at(e * 6 + i, 6, 0) for i in range(6)) for e in range(5)}
        assert len(orders) > 1


class TestTraining:
    def test_deterministic(self):
        vols = _volumes()
        cfg = TrainConfig(iterations=6, lr=1e-3)
        _, _, a = train(vols, SMALL, cfg)
        _, _, b = train(vols, SMALL, cfg)
        assert a == b and len(a) == 6

    def test_resume_reproduces_trace(self, tmp_path):
        vols = _volumes()
        cfg = TrainConfig(iterations=8, lr=1e-3, checkpoint_every=4)
        full_params, _, full = train(vols, SMALL, cfg)
        train(vols, SMALL, TrainConfig(iterations=4, lr=1e-3, checkpoint_every=4), checkpoint_dir=tmp_path)
        ck = load_checkpoint(tmp_path / "iter-000004.fnck", SMALL)
        params, _, rest = train(vols, SMALL, cfg, params=ck["params"], state=ck["state"],
                                start_iteration=ck["iteration"])
        assert rest == full[4:]
        assert all(np.array_equal(params[k], full_params[k]) for k in params)

    def test_zero_lambda_no_sparsity_contribution(self):
        _, _, tr = train(_volumes(2), SMALL, TrainConfig(iterations=3, lam=0.0, lr=1e-3))
        assert all(r.total == r.data_fit for r in tr)
        assert all(r.sparsity > 0 for r in tr)

    def test_mismatched_subjects_rejected(self):
        vols = _volumes(2) + [Volume4D(np.zeros((16, 8, 8, 6), np.float32))]
        with pytest.raises(ValueError, match="share"):
            train(vols, SMALL, TrainConfig(iterations=1))
        with pytest.raises(ValueError, match="empty"):
            train([], SMALL, TrainConfig(iterations=1))

    def test_nan_halts_with_subject(self, tmp_path):
        vols = _volumes(2)
        vols[1].values[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingHalted) as info:
            train(vols, SMALL, TrainConfig(iterations=4, checkpoint_every=1), ids=["a", "b"],
                  checkpoint_dir=tmp_path)
        assert info.value.subject == "b"

    def test_small_step_decreases_loss(self):
        failures = []
        for seed in range(10):
            vol = _volumes(1, seed=seed)
            x, dm = prepare_subjects(vol, SMALL)[0]
            params = init_params(SMALL, seed=seed)
            (_, _, before), grads = loss_and_grads(params, x, dm, SMALL, 1e-3)
            new, _ = adam_step(params, grads, AdamState.zeros_like(params), 1e-6)
            (_, _, after), _ = loss_and_grads(new, x, dm, SMALL, 1e-3)
            if not after < before:
                failures.append(seed)
        # one curvature failure is tolerated
        assert len(failures) <= 1, failures

    def test_loss_decreases_on_synthetic_subject(self):
        cohort = generate_cohort(CohortSpec(n_subjects=1, dims=(16, 16, 16, 20), k_true=4, seed=5))
        cfg = ModelConfig(channels=8, n_networks=4)
        _, _, tr = train(cohort.volumes, cfg, TrainConfig(iterations=500, lr=1e-4))
        total = np.array([r.total for r in tr])
        smooth = np.convolve(total, np.ones(50) / 50, mode="valid")
        # smooth[i] averages iterations i+1 .. i+50
        start, end = smooth[0], smooth[-1]
        print(f"smoothed total at 50: {start:.5f}, at 500: {end:.5f}, drop {1 - end / start:.1%}")
        assert end <= 0.7 * start


class TestTrace:
    def test_roundtrip(self, tmp_path):
        _, _, tr = train(_volumes(2), SMALL, TrainConfig(iterations=3, lr=1e-3))
        write_trace(tmp_path / "t.tsv", tr)
        assert read_trace(tmp_path / "t.tsv") == tr
        assert (tmp_path / "t.tsv").read_text().splitlines()[0] == "iteration\tsubject\tdata_fit\tsparsity\ttotal"


class TestCheckpoint:
    def _state(self):
        p = init_params(SMALL, seed=2)
        rng = np.random.default_rng(0)
        state = AdamState({k: rng.normal(size=v.shape).astype(np.float32) for k, v in p.items()},
                          {k: rng.random(v.shape).astype(np.float32) for k, v in p.items()}, 17)
        return p, state

    def test_roundtrip_bitwise(self, tmp_path):
        p, state = self._state()
        tc = TrainConfig(iterations=40, seed=9)
        save_checkpoint(tmp_path / "c.fnck", p, state, SMALL, tc, iteration=17)
        ck = load_checkpoint(tmp_path / "c.fnck", SMALL)
        assert ck["model_config"] == SMALL and ck["train_config"] == tc and ck["iteration"] == 17
        assert ck["state"].step == 17
        for k in p:
            assert np.array_equal(ck["params"][k], p[k])
            assert np.array_equal(ck["state"].m[k], state.m[k])
            assert np.array_equal(ck["state"].v[k], state.v[k])

    def test_truncated(self, tmp_path):
        p, state = self._state()
        path = tmp_path / "c.fnck"
        save_checkpoint(path, p, state, SMALL)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="incomplete tensor adam_v:out.bias"):
            load_checkpoint(path)
        path.write_bytes(raw[:20])
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.fnck").write_bytes(b"NOPE\n{}\n")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "c.fnck")

    def test_different_k_names_layer(self, tmp_path):
        p, state = self._state()
        save_checkpoint(tmp_path / "c.fnck", p, state, SMALL)
        other = ModelConfig(**{**SMALL.to_dict(), "n_networks": 5})
        with pytest.raises(CheckpointError, match=r"out\.kernel") as info:
            load_checkpoint(tmp_path / "c.fnck", other)
        assert "out.bias" in str(info.value) and "enc0" not in str(info.value)
