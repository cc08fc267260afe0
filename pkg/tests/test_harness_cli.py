import csv
import math
import os
import statistics

import numpy as np
import pytest

from confwise import __version__, harness
from confwise.cli import main
from confwise.metrics import bece, merge_reports
from confwise.synth import SynthConfig, generate
from confwise.tensor_io import read_tensor, write_tensor

FAST = ["n_samples=6", "height=32", "width=32", "epochs=1"]


def read_rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def comment_lines(path):
    with open(path) as fh:
        return [ln.rstrip("\n") for ln in fh if ln.startswith("#")]


def one_hot(labels, C):
    return np.eye(C)[labels].transpose(2, 0, 1)


def dir_bytes(d):
    return {n: open(os.path.join(d, n), "rb").read() for n in sorted(os.listdir(d))}


class TestConfig:
    def test_defaults(self):
        cfg = harness.ExperimentConfig()
        assert cfg.alpha == 0.4 and cfg.q == 0.8 and cfg.loss == "acw"

    def test_items_roundtrip(self):
        cfg = harness.ExperimentConfig(name="x", seeds=(3, 4), literal_percentile=True, alpha=0.25)
        assert harness.config_from_items(cfg.to_items()) == cfg

    def test_overrides(self):
        assert harness.parse_overrides(["alpha = 0.2", "seeds=1,2"]) == {"alpha": "0.2", "seeds": "1,2"}
        with pytest.raises(ValueError):
            harness.parse_overrides(["alpha"])
        with pytest.raises(ValueError):
            harness.config_from_items({"nope": "1"})
        with pytest.raises(ValueError):
            harness.config_from_items({"flip": "maybe"})
        with pytest.raises(ValueError):
            harness.config_from_items({"loss": "hinge"})

    def test_file_then_flags(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[experiment]\nalpha = 0.6\nepochs = 3\n")
        cfg = harness.load_config(p, {"epochs": "7"})
        assert cfg.alpha == 0.6 and cfg.epochs == 7

    def test_matrix(self):
        text = "[defaults]\nloss = acw\nepochs = 2\n[cell a]\nalpha = 0.1\n[cell b]\nloss = ce\n"
        cells = harness.parse_matrix(text, overrides={"epochs": "5"})
        assert [c.name for c in cells] == ["a", "b"]
        assert cells[0].alpha == 0.1 and cells[1].loss == "ce"
        assert all(c.epochs == 5 for c in cells)
        for bad in ("[defaults]\nloss=ce\n", "[cell a]\n[cell  a]\n", "[other]\n[cell a]\n"):
            with pytest.raises(ValueError):
                harness.parse_matrix(bad)

    def test_presets(self):
        alphas = [c.alpha for c in harness.load_matrix("alpha_sweep")]
        assert alphas == [0.0, 0.2, 0.4, 0.6, 0.8]
        q = harness.load_matrix("q_sweep")
        assert [c.name for c in q] == [f"Q_{k}" for k in range(10, 100, 10)]
        assert [c.q for c in q] == [k / 100 for k in range(10, 100, 10)]
        assert all(c.alpha == 0.4 for c in q)
        combos = harness.load_matrix("combos")
        assert {"acw+dice", "acw+focal", "acw+tversky", "acw+focal_tversky"} <= {c.loss for c in combos}
        d = harness.load_matrix("directional")
        assert [c.loss for c in d] == ["ce", "acw"]
        assert all(c.n_samples == 200 and c.epochs == 30 and len(c.seeds) >= 5 for c in d)


class TestAggregate:
    def test_mean_and_stdev(self):
        cfg = harness.ExperimentConfig(name="a")
        vals = [0.5, 0.75, 0.125]
        results = [harness.CellResult(cfg, i, metrics={k: v + i for k in harness.METRIC_COLUMNS})
                   for i, v in enumerate(vals)]
        results.append(harness.CellResult(cfg, 9, status="error: boom"))
        (name, n, stats), = harness.aggregate(results)
        assert name == "a" and n == 3
        xs = [v + i for i, v in enumerate(vals)]
        assert stats["ece"] == (pytest.approx(sum(xs) / 3, rel=1e-15), pytest.approx(statistics.stdev(xs), rel=1e-15))

    def test_single_seed_and_nan(self):
        cfg = harness.ExperimentConfig(name="a")
        r = harness.CellResult(cfg, 0, metrics={k: math.nan if k == "final_loss" else 1.0 for k in harness.METRIC_COLUMNS})
        (_, _, stats), = harness.aggregate([r])
        assert stats["ece"] == (1.0, 0.0)
        assert all(math.isnan(x) for x in stats["final_loss"])

    def test_split(self):
        tr, te = harness.split_dataset(list(range(200)))
        assert tr == list(range(160)) and te == list(range(160, 200))


class TestGen:
    def test_deterministic(self, tmp_path):
        args = ["gen", "--n", "10", "--seed", "7", "--height", "32", "--width", "32"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        a, b = dir_bytes(tmp_path / "a"), dir_bytes(tmp_path / "b")
        assert a == b and len(a) == 22

    def test_manifest_count(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--n", "12"]) == 0
        rows = read_rows(tmp_path / "manifest.csv")
        assert len(rows) == 12
        img = read_tensor(tmp_path / rows[3]["image"])
        assert img.shape == (1, 64, 64) and img.dtype == np.float32
        assert read_tensor(tmp_path / rows[3]["label"]).dtype == np.uint8

    def test_bad_args(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--n", "0"]) == 1
        assert main(["gen", "--out", str(tmp_path), "--height", "8"]) == 1
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--n", "3"])
        assert exc.value.code == 1


@pytest.fixture
def corpus(tmp_path):
    """Five synthetic label maps plus noisy probability predictions."""
    samples = generate(SynthConfig(height=32, width=32, seed=4), 5)
    lbl, pred = tmp_path / "lbl", tmp_path / "pred"
    lbl.mkdir()
    pred.mkdir()
    rng = np.random.default_rng(0)
    probs = []
    for i, s in enumerate(samples):
        write_tensor(lbl / f"lbl_{i:05d}.segt", s.labels)
        logits = 3 * one_hot(s.labels, 4) + rng.normal(size=(4, 32, 32))
        p = np.exp(logits) / np.exp(logits).sum(axis=0)
        probs.append(p)
        write_tensor(pred / f"pred_{i:05d}.segt", p)
    return tmp_path, samples, probs


class TestEval:
    def test_perfect(self, corpus, tmp_path):
        root, samples, _ = corpus
        perfect = tmp_path / "perfect"
        perfect.mkdir()
        for i, s in enumerate(samples):
            write_tensor(perfect / f"p_{i:05d}.segt", one_hot(s.labels, 4))
        assert main(["eval", "--pred", str(perfect), "--labels", str(root / "lbl"), "--out", str(tmp_path / "o")]) == 0
        rows = read_rows(tmp_path / "o" / "metrics.csv")
        assert all(float(r["dsc"]) == 1.0 and float(r["hd95"]) == 0.0 for r in rows)
        pooled = [r for r in read_rows(tmp_path / "o" / "calibration.csv") if r["image"] == "pooled"][0]
        assert float(pooled["bece"]) == 0.0 and float(pooled["ece"]) == 0.0

    def test_label_map_predictions(self, corpus, tmp_path):
        root, samples, _ = corpus
        d = tmp_path / "maps"
        d.mkdir()
        for i, s in enumerate(samples):
            write_tensor(d / f"m_{i:05d}.segt", s.labels)
        out = tmp_path / "o"
        assert main(["eval", "--pred", str(d), "--labels", str(root / "lbl"), "--out", str(out), "--num-classes", "4"]) == 0
        assert all(float(r["dsc"]) == 1.0 for r in read_rows(out / "metrics.csv"))

    def test_pooled_equals_merge(self, corpus):
        root, samples, probs = corpus
        out = root / "out"
        assert main(["eval", "--pred", str(root / "pred"), "--labels", str(root / "lbl"), "--out", str(out)]) == 0
        merged = merge_reports(bece(p, s.labels, 10, 2, "square") for p, s in zip(probs, samples))
        # oracle: add the per-image bin counts by hand and score
        reports = [bece(p, s.labels, 10, 2, "square") for p, s in zip(probs, samples)]
        count = sum(r.count for r in reports)
        conf = sum(r.conf_sum for r in reports)
        acc = sum(r.acc_sum for r in reports)
        oracle = np.abs(conf - acc).sum() / count.sum()
        pooled = [r for r in read_rows(out / "calibration.csv") if r["image"] == "pooled"][0]
        assert float(pooled["bece"]) == merged.score
        assert merged.score == pytest.approx(oracle, rel=1e-12)
        rel = read_rows(out / "reliability_bece.csv")
        assert [int(r["count"]) for r in rel] == list(count)
        assert (out / "reliability_bece.svg").read_text().startswith("<svg")

    def test_provenance(self, corpus):
        root, _, _ = corpus
        out = root / "out"
        main(["eval", "--pred", str(root / "pred"), "--labels", str(root / "lbl"), "--out", str(out)])
        for name in ("metrics.csv", "calibration.csv", "reliability_ece.csv"):
            assert f"# confwise version: {__version__}" in comment_lines(out / name)

    def test_empty_dir(self, corpus, tmp_path, capsys):
        root, _, _ = corpus
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", "--pred", str(empty), "--labels", str(root / "lbl"), "--out", str(tmp_path / "o")]) == 1

    def test_missing_pair(self, corpus, capsys):
        root, _, _ = corpus
        os.remove(root / "lbl" / "lbl_00003.segt")
        assert main(["eval", "--pred", str(root / "pred"), "--labels", str(root / "lbl"), "--out", str(root / "o")]) == 2
        assert "00003" in capsys.readouterr().err

    def test_malformed(self, corpus):
        root, _, _ = corpus
        (root / "pred" / "pred_00001.segt").write_bytes(b"garbage")
        assert main(["eval", "--pred", str(root / "pred"), "--labels", str(root / "lbl"), "--out", str(root / "o")]) == 2


class TestLossAndReliability:
    def test_loss(self, corpus, tmp_path, capsys):
        root, _, _ = corpus
        g = tmp_path / "g.segt"
        args = ["loss", "--probs", str(root / "pred" / "pred_00000.segt"), "--labels", str(root / "lbl" / "lbl_00000.segt")]
        assert main(args + ["--grad-out", str(g)]) == 0
        out = capsys.readouterr().out
        assert out.startswith("acw ") and "class 1: threshold" in out
        grad = read_tensor(g)
        assert grad.shape == (4, 32, 32)
        np.testing.assert_allclose(grad.sum(axis=0), 0, atol=1e-12)
        for name in ("ce", "dice", "acw+dice"):
            assert main(args + ["--loss", name]) == 0

    def test_loss_bad_file(self, tmp_path):
        p = tmp_path / "x.segt"
        p.write_bytes(b"SEGT")
        assert main(["loss", "--probs", str(p), "--labels", str(p)]) == 2

    def test_reliability(self, corpus, tmp_path):
        root, samples, probs = corpus
        files = [str(root / "pred" / f"pred_{i:05d}.segt") for i in range(5)]
        labels = [str(root / "lbl" / f"lbl_{i:05d}.segt") for i in range(5)]
        out = tmp_path / "r.csv"
        assert main(["reliability", "--probs", *files, "--labels", *labels, "--out", str(out), "--boundary",
                     "--svg", str(tmp_path / "r.svg")]) == 0
        rows = read_rows(out)
        assert len(rows) == 10 and list(rows[0]) == ["bin_lo", "bin_hi", "count", "confidence", "accuracy", "gap"]
        assert (tmp_path / "r.svg").exists()
        assert main(["reliability", "--probs", *files, "--labels", labels[0], "--out", str(out)]) == 1

    def test_help(self, capsys):
        for cmd in ("gen", "eval", "loss", "train", "compare", "reliability"):
            with pytest.raises(SystemExit) as exc:
                main([cmd, "--help"])
            assert exc.value.code == 0
        assert "--jobs" in capsys.readouterr().out


class TestTrain:
    def test_epochs_zero(self, tmp_path):
        out = tmp_path / "t"
        assert main(["train", "--out", str(out), "--set", "epochs=0", *[f"--set={s}" for s in FAST[:3]]]) == 0
        row, = read_rows(out / "results.csv")
        assert row["status"] == "ok" and row["final_loss"] == ""
        assert 0.0 <= float(row["mean_dsc"]) <= 1.0
        assert os.path.exists(out / "checkpoint" / "manifest.csv")

    def test_deterministic_and_echo(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[experiment]\nname = acw_default\nloss = acw\n")
        rows = []
        for k in range(2):
            out = tmp_path / f"t{k}"
            assert main(["train", "--config", str(cfg), "--out", str(out), *[f"--set={s}" for s in FAST]]) == 0
            rows.append(open(out / "results.csv").read())
        assert rows[0] == rows[1]
        prov = [ln for ln in rows[0].splitlines() if ln.startswith("# config acw_default")][0]
        assert "alpha=0.4;" in prov and "q=0.8;" in prov
        log = read_rows(tmp_path / "t0" / "trainlog.csv")
        assert len(log) == 1 and float(log[0]["lr"]) == 0.0015

    def test_bad_config(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "loss=nope"]) == 2


class TestCompare:
    def test_one_cell(self, tmp_path):
        m = tmp_path / "m.ini"
        m.write_text("[defaults]\nseeds = 0,1\n[cell only]\nloss = ce\n")
        out = tmp_path / "out"
        assert main(["compare", "--matrix", str(m), "--out", str(out), *[f"--set={s}" for s in FAST]]) == 0
        rows = read_rows(out / "results.csv")
        assert [(r["config"], r["seed"]) for r in rows] == [("only", "0"), ("only", "1")]
        agg, = read_rows(out / "aggregate.csv")
        assert agg["config"] == "only" and agg["n"] == "2"
        for k in harness.METRIC_COLUMNS:
            vals = [float(r[k]) for r in rows]
            assert float(agg[f"{k}_mean"]) == pytest.approx(sum(vals) / 2, rel=1e-15, abs=1e-300)
        table = (out / "table.txt").read_text().splitlines()
        body = [ln for ln in table if not ln.startswith("#")]
        assert len(body) == 2 and body[1].startswith("only")
        for name in ("results.csv", "aggregate.csv", "table.txt"):
            lines = comment_lines(out / name)
            assert lines[0] == f"# confwise version: {__version__}"
            assert any(ln.startswith("# config only: name=only; loss=ce;") for ln in lines)

    def test_cell_failure_is_recorded(self, tmp_path):
        m = tmp_path / "m.ini"
        # lr so large the net diverges in the bad cell only
        m.write_text("[defaults]\nseeds = 0\nloss = ce\n[cell good]\n[cell bad]\nbase_lr = 1e300\n")
        out = tmp_path / "out"
        assert main(["compare", "--matrix", str(m), "--out", str(out), *[f"--set={s}" for s in FAST]]) == 3
        rows = {r["config"]: r for r in read_rows(out / "results.csv")}
        assert rows["good"]["status"] == "ok"
        assert rows["bad"]["status"].startswith("error: DivergenceError")
        agg = {r["config"]: r for r in read_rows(out / "aggregate.csv")}
        assert agg["bad"]["n"] == "0" and agg["good"]["n"] == "1"

    def test_jobs_match_serial(self, tmp_path):
        m = tmp_path / "m.ini"
        m.write_text("[defaults]\nseeds = 0,1\n[cell a]\nloss = ce\n[cell b]\nloss = acw\n")
        outs = []
        for jobs in ("1", "2"):
            out = tmp_path / f"j{jobs}"
            assert main(["compare", "--matrix", str(m), "--out", str(out), "--jobs", jobs,
                         *[f"--set={s}" for s in FAST]]) == 0
            outs.append((out / "results.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_bad_preset(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["compare", "--preset", "nope", "--out", str(tmp_path)])
        assert exc.value.code == 1
