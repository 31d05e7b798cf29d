import csv
import hashlib
import math
from pathlib import Path

import numpy as np
import pytest

import uats.cli as cli
from uats.data import CLASS_NAMES, class_frequencies, read_dataset, read_manifest
from uats.experiments import (
    EVAL_HEADER,
    compare,
    read_csv,
    read_records,
    sweep_summary,
    write_csv,
)
from uats.metrics import aggregate
from uats.tensor import TrainingError
from uats.trainer import load_checkpoint

TINY = "max_epochs: 3\npatience: 2\nstage2_max_epochs: 2\nstage2_patience: 1\nmodel: {depth: 2, base_channels: 4}\n"


def tree_digest(directory) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(Path(directory).iterdir())}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset plus a B run and a G run trained from it."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY)
    assert cli.main(["generate", "--n", "30", "--size", "32", "--seed", "2", "--out", str(root / "data")]) == 0
    common = ["--data", root / "data", "--config", root / "tiny.yaml", "--ratio", "0.5", "--out", root / "out"]
    assert cli.main([str(a) for a in ["train", "--variant", "B", *common]]) == 0
    b_ckpt = root / "out" / "train" / "B" / "0.5" / "0" / "model.ckpt"
    assert cli.main([str(a) for a in ["train", "--variant", "G", "--from", b_ckpt, *common]]) == 0
    return root


class TestGenerate:
    def test_manifest_lists_all_ids(self, workspace):
        rows = read_manifest(workspace / "data")
        assert [r["id"] for r in rows] == [f"s{i:04d}" for i in range(30)]

    def test_refuses_overwrite(self, workspace, capsys):
        code, _, err = run(["generate", "--n", "30", "--size", "32", "--seed", "2", "--out", workspace / "data"], capsys)
        assert code == 2 and "--force" in err

    def test_force_is_byte_identical(self, tmp_path, capsys):
        argv = ["generate", "--n", "12", "--size", "32", "--seed", "7", "--out", tmp_path / "d"]
        assert run(argv, capsys)[0] == 0
        before = tree_digest(tmp_path / "d")
        assert run(argv + ["--force"], capsys)[0] == 0
        assert tree_digest(tmp_path / "d") == before

    def test_force_removes_stale_samples(self, tmp_path, capsys):
        base = ["generate", "--size", "32", "--out", tmp_path / "d"]
        run(base + ["--n", "12"], capsys)
        run(base + ["--n", "6", "--force"], capsys)
        assert len(list((tmp_path / "d").glob("*.img"))) == 6

    def test_summary_matches_recount(self, tmp_path, capsys):
        code, out, _ = run(["generate", "--n", "10", "--size", "32", "--out", tmp_path / "d"], capsys)
        printed = {}
        for line in out.splitlines()[1:]:
            name, px = line.split()[:2]
            printed[name] = int(px)
        counts = class_frequencies([s.label for s in read_dataset(tmp_path / "d") if s.label is not None])
        assert printed == dict(zip(CLASS_NAMES, counts.tolist()))

    def test_data_root_from_environment(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("UATS_DATA_ROOT", str(tmp_path / "env"))
        assert run(["generate", "--n", "4", "--size", "32"], capsys)[0] == 0
        assert (tmp_path / "env" / "manifest.tsv").exists()


class TestTrain:
    def test_output_tree(self, workspace):
        for v in "BG":
            d = workspace / "out" / "train" / v / "0.5" / "0"
            assert sorted(p.name for p in d.iterdir()) == ["epochs.csv", "eval.csv", "model.ckpt"]
            for name in ("epochs.csv", "eval.csv"):
                first, header = (d / name).read_text().splitlines()[:2]
                assert first.startswith("# uats 0.1.0 config=") and "seed=0" in first
                assert "," in header and not header.startswith("#")

    def test_stage_recorded(self, workspace):
        b = load_checkpoint(workspace / "out" / "train" / "B" / "0.5" / "0" / "model.ckpt")
        g = load_checkpoint(workspace / "out" / "train" / "G" / "0.5" / "0" / "model.ckpt")
        assert (b.extra["stage"], g.extra["stage"]) == (1, 2)
        assert b.extra["test_hash"] == g.extra["test_hash"]

    def test_g_log_is_stage2_only(self, workspace):
        rows = read_csv(workspace / "out" / "train" / "G" / "0.5" / "0" / "epochs.csv")
        assert {r["stage"] for r in rows} == {"2"}

    def test_unknown_variant(self, workspace, capsys):
        code, _, err = run(["train", "--variant", "Z", "--data", workspace / "data"], capsys)
        assert code == 1
        assert "B, C, D, E, F, G, H, I, J" in err

    def test_missing_stage1_checkpoint(self, workspace, capsys):
        code, _, err = run(["train", "--variant", "G", "--from", workspace / "nope.ckpt", "--data", workspace / "data",
                            "--config", workspace / "tiny.yaml", "--ratio", "0.5", "--out", workspace / "o2"], capsys)
        assert code == 2 and "does not exist" in err

    def test_stage2_checkpoint_rejected_as_start(self, workspace, capsys):
        g = workspace / "out" / "train" / "G" / "0.5" / "0" / "model.ckpt"
        code, _, err = run(["train", "--variant", "H", "--from", g, "--data", workspace / "data",
                            "--config", workspace / "tiny.yaml", "--ratio", "0.5", "--out", workspace / "o3"], capsys)
        assert code == 2 and "Stage-I" in err

    def test_other_split_rejected(self, workspace, capsys):
        b = workspace / "out" / "train" / "B" / "0.5" / "0" / "model.ckpt"
        code, _, err = run(["train", "--variant", "G", "--from", b, "--repeat", "1", "--data", workspace / "data",
                            "--config", workspace / "tiny.yaml", "--ratio", "0.5", "--out", workspace / "o4"], capsys)
        assert code == 2 and "different split" in err

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(["train", "--data", tmp_path / "none"], capsys)
        assert code == 2 and "generate" in err

    def test_refuses_overwrite_then_force_is_identical(self, workspace, capsys):
        d = workspace / "out" / "train" / "B" / "0.5" / "0"
        before = tree_digest(d)
        argv = ["train", "--variant", "B", "--data", workspace / "data", "--config", workspace / "tiny.yaml",
                "--ratio", "0.5", "--out", workspace / "out"]
        assert run(argv, capsys)[0] == 2
        assert run(argv + ["--force"], capsys)[0] == 0
        assert tree_digest(d) == before

    def test_printed_summary_equals_recomputation(self, workspace, capsys):
        argv = ["train", "--variant", "B", "--data", workspace / "data", "--config", workspace / "tiny.yaml",
                "--ratio", "0.5", "--out", workspace / "out", "--force"]
        _, out, _ = run(argv, capsys)
        recs = read_records([workspace / "out" / "train" / "B" / "0.5" / "0" / "eval.csv"])["B"].values()
        summ = aggregate(recs)
        for line in out.splitlines()[2:]:
            v, name, metric, mean = line.split()[:4]
            expected = summ[(v, CLASS_NAMES.index(name), metric)].mean
            if math.isnan(expected):
                assert mean == "nan"
            else:
                assert float(mean) == pytest.approx(expected, abs=5e-5)

    def test_divergence_exit_code(self, workspace, capsys, monkeypatch):
        def boom(*args, **kw):
            raise TrainingError("loss became nan")

        monkeypatch.setattr(cli, "train_run", boom)
        code, _, err = run(["train", "--data", workspace / "data", "--ratio", "0.5", "--out", workspace / "o5"], capsys)
        assert code == 3 and "nan" in err


class TestEvaluate:
    def test_matches_training_records(self, workspace, capsys, tmp_path):
        d = workspace / "out" / "train" / "G" / "0.5" / "0"
        assert run(["evaluate", d / "model.ckpt", "--data", workspace / "data", "--out", tmp_path / "e.csv"], capsys)[0] == 0
        assert read_csv(tmp_path / "e.csv") == read_csv(d / "eval.csv")

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"nonsense")
        assert run(["evaluate", tmp_path / "x.ckpt"], capsys)[0] == 2


class TestNoiseSweep:
    @pytest.fixture(scope="class")
    @classmethod
    def sweep(cls, workspace):
        out = workspace / "noise.csv"
        ckpt = workspace / "out" / "train" / "G" / "0.5" / "0" / "model.ckpt"
        assert cli.main(["noise-sweep", str(ckpt), "--data", str(workspace / "data"), "--out", str(out)]) == 0
        return read_csv(out)

    def test_rows(self, sweep):
        sigmas = sorted({float(r["sigma"]) for r in sweep})
        assert sigmas == [0.0, 0.01, 0.025, 0.05, 0.1, 0.2]
        assert len(sweep) == 6 * 4

    def test_baseline_equals_clean_evaluation(self, sweep, workspace):
        recs = read_records([workspace / "out" / "train" / "G" / "0.5" / "0" / "eval.csv"])["G"].values()
        summ = aggregate(recs)
        for r in sweep:
            if float(r["sigma"]) == 0.0:
                assert float(r["dc_mean"]) == summ[("G", int(r["class"]), "dc")].mean
                assert r["snr"] == "inf"

    def test_snr_decreasing(self, sweep):
        snr = {}
        for r in sweep:
            snr[float(r["sigma"])] = float(r["snr"])
        values = [snr[s] for s in sorted(snr)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_rejects_zero_sigma(self, workspace, capsys):
        ckpt = workspace / "out" / "train" / "G" / "0.5" / "0" / "model.ckpt"
        assert run(["noise-sweep", ckpt, "--sigmas", "0,0.1", "--data", workspace / "data"], capsys)[0] == 1


class TestRatioSweep:
    @pytest.fixture(scope="class")
    @classmethod
    def sweep(cls, workspace):
        argv = ["ratio-sweep", "--data", workspace / "data", "--config", workspace / "tiny.yaml",
                "--ratios", "0.05,0.5", "--repeats", "2", "--variants", "B,G", "--out", workspace / "sw1"]
        assert cli.main([str(a) for a in argv]) == 0
        return workspace / "sw1" / "ratio-sweep"

    def test_runs_and_skip_rows(self, sweep):
        rows = read_csv(sweep / "ratio_sweep.csv")
        skipped = [r for r in rows if r["status"] != "ok"]
        assert len(skipped) == 2 * 2 and all(r["ratio"] == "0.05" for r in skipped)
        ok = [r for r in rows if r["status"] == "ok"]
        assert len(ok) == 2 * 2 * 4
        runs = sorted(p.parent for p in sweep.rglob("model.ckpt"))
        assert len(runs) == 4

    def test_test_set_fixed(self, sweep):
        hashes = {load_checkpoint(p).extra["test_hash"] for p in sweep.rglob("model.ckpt")}
        assert len(hashes) == 1

    def test_summary_recomputation(self, sweep):
        rows = read_csv(sweep / "ratio_sweep.csv")
        summary = read_csv(sweep / "ratio_summary.csv")
        for s in summary:
            vals = [float(r["dc"]) for r in rows if r["status"] == "ok" and r["ratio"] == s["ratio"]
                    and r["variant"] == s["variant"] and r["class"] == s["class"]]
            assert float(s["dc_mean"]) == pytest.approx(np.mean(vals), abs=1e-15)
            assert int(s["n_repeats"]) == len(vals)

    def test_parallel_matches_serial(self, sweep, workspace):
        argv = ["ratio-sweep", "--data", workspace / "data", "--config", workspace / "tiny.yaml",
                "--ratios", "0.05,0.5", "--repeats", "2", "--variants", "B,G", "--out", workspace / "sw2", "--jobs", "2"]
        assert cli.main([str(a) for a in argv]) == 0
        other = workspace / "sw2" / "ratio-sweep"
        assert (other / "ratio_sweep.csv").read_bytes() == (sweep / "ratio_sweep.csv").read_bytes()
        assert (other / "ratio_summary.csv").read_bytes() == (sweep / "ratio_summary.csv").read_bytes()

    def test_sweep_summary_skips_failures(self):
        rows = [["0.1", 0, "G", 1, "blob", 0.5, "ok"], ["0.1", 1, "G", 1, "blob", 0.7, "ok"],
                ["0.05", 0, "G", "", "", math.nan, "skipped: too small"]]
        assert sweep_summary(rows) == [["0.1", "G", 1, "blob", 0.6, pytest.approx(0.1), 2]]


def write_records(path, variant, dcs):
    rows = [[f"s{i}", variant, "0.1", 0, 1, "blob", float(v), 1.0] for i, v in enumerate(dcs)]
    write_csv(path, EVAL_HEADER, rows, "uats test")
    return path


class TestCompare:
    def test_self_comparison(self, workspace, capsys, tmp_path):
        b = workspace / "out" / "train" / "B" / "0.5" / "0" / "eval.csv"
        assert run(["compare", b, "--out", tmp_path / "c.csv"], capsys)[0] == 0
        rows = read_csv(tmp_path / "c.csv")
        assert list(rows[0]) == ["variant", "class", "metric", "mean", "sd", "n", "p_vs_baseline", "stars"]
        dc_rows = [r for r in rows if r["metric"] == "dc"]
        assert dc_rows and all(float(r["p_vs_baseline"]) == 1.0 and r["stars"] == "" for r in dc_rows)

    def test_six_uniform_improvements(self, tmp_path, capsys):
        base = np.array([0.50, 0.55, 0.60, 0.62, 0.70, 0.71])
        write_records(tmp_path / "b.csv", "B", base)
        write_records(tmp_path / "g.csv", "G", base + np.arange(1, 7) * 0.01)
        assert run(["compare", tmp_path / "b.csv", tmp_path / "g.csv", "--out", tmp_path / "c.csv"], capsys)[0] == 0
        row = [r for r in read_csv(tmp_path / "c.csv") if r["variant"] == "G" and r["metric"] == "dc"][0]
        assert float(row["p_vs_baseline"]) == 0.03125
        assert row["stars"] == "*"

    def test_unpaired_is_error(self, tmp_path, capsys):
        write_records(tmp_path / "b.csv", "B", [0.1, 0.2, 0.3])
        write_records(tmp_path / "g.csv", "G", [0.1, 0.2])
        code, _, err = run(["compare", tmp_path / "b.csv", tmp_path / "g.csv"], capsys)
        assert code == 2 and "not paired" in err

    def test_missing_baseline(self, tmp_path, capsys):
        write_records(tmp_path / "g.csv", "G", [0.1, 0.2])
        code, _, err = run(["compare", tmp_path / "g.csv"], capsys)
        assert code == 2 and "baseline" in err

    def test_directory_search(self, workspace, tmp_path, capsys):
        assert run(["compare", workspace / "out" / "train", "--out", tmp_path / "c.csv"], capsys)[0] == 0
        assert {r["variant"] for r in read_csv(tmp_path / "c.csv")} == {"B", "G"}

    def test_library_pairs_by_ratio_and_repeat(self, tmp_path):
        write_records(tmp_path / "b.csv", "B", [0.1, 0.2])
        rows = [[f"s{i}", "G", "0.1", 1, 1, "blob", 0.3, 1.0] for i in range(2)]
        write_csv(tmp_path / "g.csv", EVAL_HEADER, rows, "uats test")
        with pytest.raises(cli.DataError, match="not paired"):
            compare(read_records([tmp_path / "b.csv", tmp_path / "g.csv"]))


class TestUsage:
    def test_no_command(self, capsys):
        assert run([], capsys)[0] == 1

    def test_bad_flag(self, capsys):
        assert run(["generate", "--bogus"], capsys)[0] == 1

    def test_verbs(self):
        parser = cli.build_parser()
        sub = next(a for a in parser._actions if a.dest == "command")
        assert set(sub.choices) == {"generate", "train", "evaluate", "noise-sweep", "ratio-sweep", "compare"}

    def test_csv_dialect(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 0.5]], "uats test")
        raw = p.read_bytes()
        assert b"\r" not in raw and raw.endswith(b"\n")
        assert list(csv.reader(raw.decode().splitlines()[1:])) == [["a", "b"], ["1", "0.5"]]
