import json

import numpy as np
import pytest

from fndecomp.cli import main
from fndecomp.data import load_volume, read_manifest
from fndecomp.trainer import load_checkpoint, read_trace

TINY = {
    "cohort": {"n_subjects": 5, "dims": [8, 8, 8, 12], "k_true": 3, "blob_sigma": 1.5, "min_separation": 3.0,
               "covariate_shift": 1.0, "sigma_pos": 0.2},
    "model": {"channels": 3, "n_networks": 3, "enc_width": 4, "down_widths": [4, 4, 4],
              "up_widths": [4, 4, 4], "post_widths": [4, 4]},
    "train": {"lr": 1e-3, "iterations": 6, "checkpoint_every": 3},
    "nmf": {"n_networks": 3, "max_iters": 50},
    "eval": {"repetitions": 3},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def cohort(tmp_path, config):
    out = tmp_path / "cohort"
    assert main(["synth", "--config", config, "--seed", "3", "--out", str(out)]) == 0
    return out


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynth:
    def test_layout(self, cohort):
        entries = read_manifest(cohort / "manifest.tsv")
        assert len(entries) == 5
        assert all(c is not None for _, c in entries)
        assert len(list((cohort / "subjects").glob("*.fnv"))) == 5
        truth = load_volume(cohort / "truth" / "sub-000_fns.fnv")
        assert truth.kind == "fns" and truth.dims == (8, 8, 8, 3)
        resolved = json.loads((cohort / "config.resolved.json").read_text())
        assert resolved["cohort"]["seed"] == 3 and resolved["cohort"]["n_subjects"] == 5

    def test_rerun_byte_identical(self, tmp_path, config, cohort):
        again = tmp_path / "again"
        assert main(["synth", "--config", config, "--seed", "3", "--out", str(again)]) == 0
        assert _tree(again) == _tree(cohort)

    def test_bad_dims(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"cohort": {"dims": [12, 8, 8, 10]}}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
        assert "divisible by 8" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"learning_rate": 1}}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
        assert "learning_rate" in capsys.readouterr().err


class TestTrain:
    def test_smoke_and_rerun(self, tmp_path, config, cohort):
        out = tmp_path / "run"
        args = ["train", "--config", config, "--out", str(out), str(cohort / "manifest.tsv")]
        assert main(args) == 0
        assert len(read_trace(out / "loss_trace.tsv")) == 6
        assert (out / "checkpoints" / "iter-000003.fnck").is_file()
        assert load_checkpoint(out / "checkpoint.fnck")["iteration"] == 6
        json.loads((out / "config.resolved.json").read_text())
        first = _tree(out)
        assert main(args) == 0
        assert _tree(out) == first

    def test_iters_flag(self, tmp_path, config, cohort):
        out = tmp_path / "run"
        assert main(["train", "--config", config, "--iters", "2", "--out", str(out), str(cohort / "manifest.tsv")]) == 0
        assert len(read_trace(out / "loss_trace.tsv")) == 2

    def test_resume(self, tmp_path, config, cohort):
        full, part = tmp_path / "full", tmp_path / "part"
        manifest = str(cohort / "manifest.tsv")
        assert main(["train", "--config", config, "--out", str(full), manifest]) == 0
        assert main(["train", "--config", config, "--out", str(part),
                     "--checkpoint", str(full / "checkpoints" / "iter-000003.fnck"), manifest]) == 0
        assert read_trace(part / "loss_trace.tsv") == read_trace(full / "loss_trace.tsv")[3:]
        assert (part / "checkpoint.fnck").read_bytes() == (full / "checkpoint.fnck").read_bytes()

    def test_missing_volume(self, tmp_path, config, cohort, capsys):
        victim = cohort / "subjects" / "sub-002.fnv"
        victim.unlink()
        assert main(["train", "--config", config, "--out", str(tmp_path / "r"), str(cohort / "manifest.tsv")]) == 2
        assert str(victim) in capsys.readouterr().err

    def test_nan_exit_code(self, tmp_path, config, cohort):
        from fndecomp.data import save_volume
        vol = load_volume(cohort / "subjects" / "sub-001.fnv")
        vol.values[0, 0, 0, 0] = np.nan
        save_volume(cohort / "subjects" / "sub-001.fnv", vol)
        assert main(["train", "--config", config, "--out", str(tmp_path / "r"), str(cohort / "manifest.tsv")]) == 3


class TestInfer:
    def test_outputs(self, tmp_path, config, cohort):
        run = tmp_path / "run"
        assert main(["train", "--config", config, "--out", str(run), str(cohort / "manifest.tsv")]) == 0
        out = tmp_path / "pred"
        subjects = sorted(str(p) for p in (cohort / "subjects").glob("*.fnv"))
        # the first subject twice under another name checks determinism
        twin = tmp_path / "twin.fnv"
        twin.write_bytes((cohort / "subjects" / "sub-000.fnv").read_bytes())
        assert main(["infer", "--checkpoint", str(run / "checkpoint.fnck"), "--out", str(out),
                     *subjects, str(twin)]) == 0
        a = load_volume(out / "sub-000_fns.fnv")
        assert a.dims == (8, 8, 8, 3)
        assert np.array_equal(a.values, load_volume(out / "twin_fns.fnv").values)
        labels = load_volume(out / "sub-000_labels.fnv")
        assert labels.kind == "labels"
        np.testing.assert_array_equal(labels.values[..., 0], np.argmax(a.values, axis=-1))
        rows = [l for l in (out / "timing.tsv").read_text().splitlines() if not l.startswith(("#", "subject"))]
        assert len(rows) == 6

    def test_needs_checkpoint(self, tmp_path, cohort):
        assert main(["infer", "--out", str(tmp_path / "p"), str(cohort / "manifest.tsv")]) == 2


class TestNMF:
    def test_noiseless_match_report(self, tmp_path):
        cfg = {"cohort": {"n_subjects": 1, "dims": [16, 16, 16, 40], "noise_sigma": 0.0, "separable": True},
               "nmf": {"n_networks": 4}}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        cohort = tmp_path / "cohort"
        assert main(["synth", "--config", str(path), "--out", str(cohort)]) == 0
        out = tmp_path / "nmf"
        assert main(["nmf", "--config", str(path), "--out", str(out), str(cohort / "manifest.tsv")]) == 0
        lines = (out / "match_report.tsv").read_text().splitlines()
        assert float(lines[1].split("\t")[1]) > 0.99
        trace = [l.split("\t") for l in (out / "sub-000_trace.tsv").read_text().splitlines()[1:]]
        totals = [float(t[1]) for t in trace]
        assert all(b <= a + 1e-9 for a, b in zip(totals, totals[1:]))

    def test_rerun_byte_identical(self, tmp_path, config, cohort):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["nmf", "--config", config, "--out", str(out), str(cohort / "manifest.tsv")]) == 0
        assert _tree(a) == _tree(b)

    def test_k_above_t(self, tmp_path, config, cohort, capsys):
        assert main(["nmf", "--config", config, "--k", "13", "--out", str(tmp_path / "n"),
                     str(cohort / "subjects" / "sub-000.fnv")]) == 2
        assert "K=13" in capsys.readouterr().err


class TestEval:
    def test_truth_against_itself(self, tmp_path, config, cohort):
        out = tmp_path / "ev"
        truth = str(cohort / "truth")
        assert main(["eval", "--config", config, "--pred", truth, "--truth", truth, "--out", str(out)]) == 0
        rows = [l.split("\t") for l in (out / "match_report.tsv").read_text().splitlines()[1:] if l[0] != "#"]
        assert len(rows) == 5 and all(float(r[1]) == pytest.approx(1.0) for r in rows)

    def test_prediction_report(self, tmp_path, config, cohort):
        out = tmp_path / "ev"
        truth = str(cohort / "truth")
        assert main(["eval", "--config", config, "--pred", truth, "--manifest", str(cohort / "manifest.tsv"),
                     "--out", str(out)]) == 0
        text = (out / "prediction_report.tsv").read_text()
        assert "# mean_r" in text and len(text.splitlines()) == 1 + 3 + 4

    def test_missing_truth_subject(self, tmp_path, config, cohort, capsys):
        truth = cohort / "truth"
        pred = tmp_path / "pred"
        pred.mkdir()
        for p in truth.glob("*_fns.fnv"):
            (pred / p.name).write_bytes(p.read_bytes())
        (truth / "sub-004_fns.fnv").unlink()
        assert main(["eval", "--pred", str(pred), "--truth", str(truth), "--out", str(tmp_path / "e")]) == 2
        assert "sub-004" in capsys.readouterr().err
