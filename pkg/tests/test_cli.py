import json

import numpy as np
import pytest

from blockpunch.cli import EXIT_DATA, EXIT_INFEASIBLE, EXIT_OK, EXIT_USAGE, main
from blockpunch.graph import count_weights, load_weights
from blockpunch.pruner import load_masks

from conftest import FIXTURES

QUICK = ["--size", "240", "--n-train", "160", "--dense-epochs", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def report(directory, name):
    return json.loads((directory / f"{name}_report.json").read_text())


def files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())
            if p.is_file() and "_report." not in p.name}


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "prune")[0] == EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys, "prune", "--model", "toy4", "--rate", "abc")[0] == EXIT_USAGE
    code, _, err = run(capsys, "prune", "--model", "toy4", "--block", "8x999", "--out", tmp_path)
    assert code == EXIT_USAGE and "usage error" in err
    assert run(capsys, "prune", "--model", "toy4", "--override", "fc", "--out", tmp_path)[0] == EXIT_USAGE
    assert run(capsys, "schedule", "--model", "micro", "--out", tmp_path)[0] == EXIT_USAGE


def test_data_errors(capsys, tmp_path):
    code, _, err = run(capsys, "prune", "--model", "nope", "--out", tmp_path)
    assert code == EXIT_DATA and "nope" in err
    bad = tmp_path / "bad.model"
    bad.write_text("blockpunch-model 1\ninput 1 2 2\nlayer id=a kind=deconv inputs=-\n")
    code, _, err = run(capsys, "prune", "--model", bad, "--method", "projection", "--out", tmp_path)
    assert code == EXIT_DATA and "line 3" in err
    assert run(capsys, "unpack", "--model", "toy4", "--packed", tmp_path / "missing", "--out", tmp_path)[0] == EXIT_DATA
    assert run(capsys, "schedule", "--model", "micro", "--profile", tmp_path / "none.profile",
               "--out", tmp_path)[0] == EXIT_DATA


def test_infeasible_target(capsys, tmp_path):
    code, _, err = run(capsys, "prune", "--model", "toy4", "--rate", "1000", "--method", "projection",
                       "--out", tmp_path)
    assert code == EXIT_INFEASIBLE and "infeasible" in err


def test_prune_rate_one_is_noop(capsys, tmp_path, toy):
    code, out, _ = run(capsys, "prune", "--model", "toy4", "--rate", "1", *QUICK, "--out", tmp_path)
    assert code == EXIT_OK and "prune toy4" in out
    rep = report(tmp_path, "prune")
    assert rep["summary"]["rate"] == 1.0
    assert rep["summary"]["weights_before"] == rep["summary"]["weights_after"] == count_weights(toy).total
    assert rep["summary"]["accuracy_dense"] == rep["summary"]["accuracy_pruned"]
    assert all(m.kept.all() for m in load_masks(tmp_path / "masks.json").values())


def test_prune_report_consistent_with_counts(capsys, tmp_path, toy):
    code, _, _ = run(capsys, "prune", "--model", "toy4", "--rate", "8", "--override", "fc=1",
                     "--method", "projection", "--out", tmp_path)
    assert code == EXIT_OK
    rep = report(tmp_path, "prune")
    counts = count_weights(toy)
    assert rep["summary"]["weights_before"] == counts.total
    assert sum(r["weights"] for r in rep["rows"]) == counts.total
    assert sum(r["kept"] for r in rep["rows"]) == rep["summary"]["weights_after"]
    assert rep["summary"]["rate"] == pytest.approx(counts.total / rep["summary"]["weights_after"])
    assert rep["summary"]["rate"] == pytest.approx(8.0, rel=0.02)
    weights = load_weights(tmp_path / "weights.bpw", toy)
    masks = load_masks(tmp_path / "masks.json")
    for lid, mask in masks.items():
        assert not weights[lid].gemm_view[~mask.dense()].any()


def test_pipeline_round_trip_and_run(capsys, tmp_path, micro):
    pruned, packed, unpacked = tmp_path / "pruned", tmp_path / "packed", tmp_path / "unpacked"
    assert run(capsys, "prune", "--model", "micro", "--rate", "3", "--method", "projection", "--out", pruned)[0] == 0
    assert run(capsys, "pack", "--model", "micro", "--weights", pruned / "weights.bpw",
               "--masks", pruned / "masks.json", "--out", packed)[0] == 0
    rep = report(packed, "pack")
    assert all(r["index_bytes"] < r["csr_index_bytes"] for r in rep["rows"])
    assert run(capsys, "unpack", "--model", "micro", "--packed", packed, "--out", unpacked)[0] == 0
    assert (unpacked / "weights.bpw").read_bytes() == (pruned / "weights.bpw").read_bytes()
    assert load_masks(unpacked / "masks.json") == load_masks(pruned / "masks.json")

    sched = tmp_path / "sched"
    code, out, _ = run(capsys, "schedule", "--model", "micro", "--profile", FIXTURES / "micro.profile", "--out", sched)
    assert code == 0
    rows = {r["structure"]: r for r in report(sched, "schedule")["rows"]}
    assert rows["csp"]["makespan_ms"] == 10.0 and rows["csp"]["lanes"] == "GC"
    assert rows["head"]["makespan_ms"] == 6.0

    x = np.random.default_rng(0).standard_normal((2, *micro.input_shape))
    np.save(tmp_path / "x.npy", x)
    for backend in ("numpy", "cython"):
        from blockpunch.runtime.kernels import BACKENDS

        if backend not in BACKENDS:
            continue
        out_dir = tmp_path / f"run_{backend}"
        code, _, err = run(capsys, "run", "--model", "micro", "--packed", packed, "--schedule", sched / "schedule.txt",
                           "--input", tmp_path / "x.npy", "--backend", backend, "--check", "--out", out_dir)
        assert code == 0, err
        rep = report(out_dir, "run")
        assert rep["summary"]["max_rel_error_vs_dense"] < 1e-4
        assert "duration_ms" in rep["measured_columns"]
        with np.load(out_dir / "outputs.npz") as npz:
            assert npz["cls"].shape == (2, 4, 1, 1)


def test_measured_schedule(capsys, tmp_path):
    pruned, packed = tmp_path / "pruned", tmp_path / "packed"
    run(capsys, "prune", "--model", "micro", "--rate", "2", "--method", "projection", "--out", pruned)
    run(capsys, "pack", "--model", "micro", "--weights", pruned / "weights.bpw", "--masks", pruned / "masks.json",
        "--out", packed)
    code, out, _ = run(capsys, "schedule", "--model", "micro", "--packed", packed, "--out", tmp_path / "s")
    assert code == 0 and "measured" in out
    assert (tmp_path / "s" / "profile.txt").is_file()


def test_fixed_seed_is_bit_reproducible(capsys, tmp_path):
    outs = []
    for i in range(2):
        d = tmp_path / str(i)
        assert run(capsys, "prune", "--model", "toy4", "--rate", "4", *QUICK, "--seed", "7", "--out", d)[0] == 0
        assert run(capsys, "pack", "--model", "toy4", "--weights", d / "weights.bpw", "--masks", d / "masks.json",
                   "--out", d / "packed")[0] == 0
        assert run(capsys, "gen-data", "--size", "50", "--seed", "7", "--out", d / "data")[0] == 0
        outs.append((files(d), files(d / "packed"), files(d / "data"), report(d, "prune")))
    assert outs[0] == outs[1]


def test_json_flag_and_yaml_config(capsys, tmp_path):
    cfg = tmp_path / "hyper.yaml"
    cfg.write_text("rounds: 1\nepochs_per_round: 1\nfinetune_epochs: 1\n")
    code, out, _ = run(capsys, "prune", "--model", "toy4", "--rate", "2", *QUICK, "--config", cfg, "--json",
                       "--out", tmp_path)
    assert code == 0
    assert json.loads(out)["summary"]["rate"] == pytest.approx(2.0, rel=0.02)
    cfg.write_text("bogus: 1\n")
    assert run(capsys, "prune", "--model", "toy4", "--rate", "2", *QUICK, "--config", cfg, "--out", tmp_path)[0] == 2


def test_gen_data_report(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-data", "--size", "11", "--out", tmp_path)
    assert code == 0
    counts = [r["count"] for r in report(tmp_path, "gen_data")["rows"]]
    assert sum(counts) == 11 and abs(counts[0] - counts[1]) <= 1


@pytest.mark.parametrize("table", ["compression-accounting", "ceiling"])
def test_reproduce_tables(capsys, tmp_path, table):
    code, out, _ = run(capsys, "reproduce", table, "--out", tmp_path)
    assert code == 0
    assert (tmp_path / f"reproduce_{table.replace('-', '_')}_report.json").is_file()


def test_reproduce_scheme_comparison_small(capsys, tmp_path):
    code, out, _ = run(capsys, "reproduce", "scheme-comparison", "--seeds", "1", "--out", tmp_path)
    assert code == 0
    rep = report(tmp_path, "reproduce_scheme_comparison")
    assert {r["scheme"] for r in rep["rows"]} >= {"unstructured", "block-punched", "filter-structured"}
