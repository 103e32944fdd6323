"""Command-line runner: config validation, output files, determinism, plots."""

import json
import math
import xml.etree.ElementTree as ET

import pytest

from photogeo import cli
from photogeo.cli import CSV_HEADER, ExperimentSpec, validate_config

TINY = {
    "scene": "room",
    "scene_seed": 7,
    "n_pairs": 2,
    "trials": 2,
    "seed_base": 500,
    "methods": ["geo-only", "photogeoseq"],
    "regimes": ["easy"],
}


def _write_cfg(path, payload):
    path.write_text(json.dumps(payload, indent=1))
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "exp.json", TINY)
    out = root / "outA"
    assert cli.main(["run", cfg, "--out", str(out)]) == 0
    return root, cfg, out


def test_validate_config_collects_every_problem(tmp_path):
    cfg = _write_cfg(tmp_path / "bad.json", {
        "trials": -3,
        "methods": ["geo-only", "warp-drive"],
        "regimes": ["easy", "impossible"],
        "scene": "tunnel",
        "banana": 1,
        "noise": {"point_sigma": -1.0, "bogus": 2},
        "fusion": {"theta_th": 0.0},
    })
    spec, errors = validate_config(cfg)
    assert spec is None
    text = "\n".join(errors)
    assert "trials: must be >= 1" in text
    assert "unknown method 'warp-drive'" in text
    assert "geo-only, visual+icp, photogeoseq, photogeoseq+" in text
    assert "unknown regime 'impossible'" in text
    assert "unknown scene" in text
    assert "banana" in text
    assert "point_sigma" in text
    assert "noise.bogus" in text
    assert "fusion: thresholds must be positive" in text
    assert len(errors) >= 8


def test_validate_config_type_mismatches(tmp_path):
    cfg = _write_cfg(tmp_path / "types.json", {"trials": "many", "timed": 3})
    spec, errors = validate_config(cfg)
    assert spec is None
    assert any("trials: expected int" in e for e in errors)
    assert any("timed: expected bool" in e for e in errors)


def test_validate_config_minimal_defaults(tmp_path):
    spec, errors = validate_config(_write_cfg(tmp_path / "min.json", {}))
    assert errors == []
    assert spec == ExperimentSpec()


def test_check_echoes_resolved_spec(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "e.json", TINY)
    rc = cli.main(["run", cfg, "--check", "--seed", "777"])
    assert rc == 0
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["seed_base"] == 777  # override applied before echo
    assert echoed["methods"] == ["geo-only", "photogeoseq"]
    assert echoed["trials"] == 2
    assert set(echoed) == {f.name for f in __import__("dataclasses").fields(ExperimentSpec)}


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "broken.json"
    bad.write_text('{"trials": \n oops}')
    assert cli.main(["run", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "config error" in err
    assert "broken.json:2" in err  # parse failures carry the line number

    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2
    cfg = _write_cfg(tmp_path / "ok.json", TINY)
    assert cli.main(["run", cfg, "--jobs", "0"]) == 2


def test_run_outputs_and_csv_backed_by_records(tiny_run):
    _, _, out = tiny_run
    csv_lines = (out / "summary.csv").read_text().splitlines()
    assert csv_lines[0] == CSV_HEADER
    assert len(csv_lines) == 1 + 2  # one row per method x regime

    records = [json.loads(l) for l in (out / "trials.jsonl").read_text().splitlines()]
    assert len(records) == 4  # 2 methods x 1 regime x 2 trials
    for line in csv_lines[1:]:
        method, regime, trials, *_ = line.split(",")
        cell = [r for r in records if r["method"] == method and r["regime"] == regime]
        succ = [r for r in cell if r["success"]]
        et = (math.sqrt(sum(r["e_t"] ** 2 for r in succ) / len(succ))
              if succ else float("nan"))
        er = (math.sqrt(sum(r["e_r"] ** 2 for r in succ) / len(succ))
              if succ else float("nan"))
        rebuilt = "%s,%s,%d,%.4f,%.9g,%.9g,%.4f,%.4f" % (
            method, regime, len(cell), len(succ) / len(cell), et, er,
            sum(r["time_s"] for r in cell) / len(cell),
            sum(r["i_n"] for r in cell) / len(cell))
        assert line == rebuilt  # every summary cell aggregates its records exactly

    trace = out / "trace_photogeoseq_easy.jsonl"
    assert trace.exists()
    rows = [json.loads(l) for l in trace.read_text().splitlines()]
    assert rows[0]["decision"] == "seed"
    assert {"offer", "decision", "eig_sum", "count", "status"} <= set(rows[0])


def test_fused_uncertainty_shrinks_along_clean_trace(tiny_run):
    _, _, out = tiny_run
    rows = [json.loads(l) for l in
            (out / "trace_photogeoseq_easy.jsonl").read_text().splitlines()]
    eig = [r["eig_sum"] for r in rows if r["decision"] in ("seed", "fuse")]
    assert len(eig) >= 2
    assert all(b < a for a, b in zip(eig, eig[1:]))


def test_rerun_and_worker_count_are_byte_identical(tiny_run):
    root, cfg, out = tiny_run
    names = ["summary.csv", "trials.jsonl", "trace_photogeoseq_easy.jsonl"]

    out_b = root / "outB"
    assert cli.main(["run", cfg, "--out", str(out_b)]) == 0
    out_c = root / "outC"
    assert cli.main(["run", cfg, "--out", str(out_c), "--jobs", "2"]) == 0

    for name in names:
        ref = (out / name).read_bytes()
        assert (out_b / name).read_bytes() == ref
        assert (out_c / name).read_bytes() == ref


def test_plot_is_deterministic_and_valid_svg(tiny_run, capsys):
    root, _, out = tiny_run
    trace = out / "trace_photogeoseq_easy.jsonl"

    p1 = root / "plots1"
    p2 = root / "plots2"
    assert cli.main(["plot", str(trace), "--out", str(p1)]) == 0
    capsys.readouterr()
    assert cli.main(["plot", str(trace), "--out", str(p2)]) == 0

    made = sorted(f.name for f in p1.iterdir())
    assert made == ["trace_photogeoseq_easy_error.svg",
                    "trace_photogeoseq_easy_evidence.svg"]
    for name in made:
        data = (p1 / name).read_bytes()
        assert data == (p2 / name).read_bytes()
        ET.fromstring(data.decode())  # well-formed XML
        assert data.lstrip().startswith(b"<svg")


def test_plot_error_paths(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["plot", str(empty)]) == 2
    assert "empty trace" in capsys.readouterr().err

    mangled = tmp_path / "mangled.jsonl"
    mangled.write_text('{"decision": "seed", "offer": 1, "eig_sum": 1e-6}\nnot json\n')
    assert cli.main(["plot", str(mangled)]) == 2
    assert "mangled.jsonl:2" in capsys.readouterr().err

    assert cli.main(["plot", str(tmp_path / "absent.jsonl")]) == 2
