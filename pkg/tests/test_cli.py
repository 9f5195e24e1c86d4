import json
import subprocess
import sys

import numpy as np
import pytest

from proofrl.cli import EXIT_FAULT, EXIT_OK, EXIT_USAGE, main, read_dataset, resolve_seed
from proofrl.exceptions import ParameterError
from proofrl.io import KIND_EM, KIND_LABELS, read_raster, write_raster
from proofrl.metrics import cremi_score
from proofrl.synth import gen_ground_truth, inject_split_error


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def _gen(out, *extra):
    return main(["gen", "--out", str(out), "--size", "128", "--segments", "20",
                 "--count", "2", "--max-errors", "2", *extra])


def test_gen_is_reproducible(tmp_path):
    assert _gen(tmp_path / "a", "--seed", "7") == EXIT_OK
    first = _files(tmp_path / "a")
    assert _gen(tmp_path / "a", "--seed", "7") == EXIT_OK
    assert _files(tmp_path / "a") == first
    assert _gen(tmp_path / "b", "--seed", "7") == EXIT_OK
    other = _files(tmp_path / "b")
    assert {k: v for k, v in other.items() if k != "manifest.json"} == \
        {k: v for k, v in first.items() if k != "manifest.json"}
    manifest = json.loads(first["manifest.json"])
    assert manifest["seeds"] == {"seed": 7} and manifest["wall_clock"] is None
    assert "em_0000.rlc" in manifest["outputs"]


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RLC_SEED", "7")
    assert _gen(tmp_path / "env") == EXIT_OK
    _gen(tmp_path / "flag", "--seed", "7")
    assert _files(tmp_path / "env")["seg_0001.rlc"] == _files(tmp_path / "flag")["seg_0001.rlc"]
    assert resolve_seed(None) == 7 and resolve_seed(3) == 3
    monkeypatch.setenv("RLC_SEED", "seven")
    with pytest.raises(ParameterError):
        resolve_seed(None)
    monkeypatch.delenv("RLC_SEED")
    assert resolve_seed(None) == 0


@pytest.mark.parametrize("argv", [[], ["nope"], ["gen"], ["gen", "--out", "x", "--count", "0"],
                                  ["run", "--mode", "locator", "--out", "x"],
                                  ["eval", "--kinds", "bogus", "--oracle"]])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "gen" in capsys.readouterr().out


def _pair(tmp_path):
    em, gt = gen_ground_truth(128, 128, 12, 2)
    seg, _ = inject_split_error(gt, np.random.default_rng(0))
    paths = {k: tmp_path / f"{k}.rlc" for k in ("em", "gt", "seg")}
    write_raster(paths["em"], em, KIND_EM)
    write_raster(paths["gt"], gt, KIND_LABELS)
    write_raster(paths["seg"], seg, KIND_LABELS)
    return paths


def test_eval_metrics_only(tmp_path, capsys):
    p = _pair(tmp_path)
    assert main(["eval", "--metrics-only", str(p["gt"]), str(p["gt"])]) == EXIT_OK
    assert "cremi: 0\n" in capsys.readouterr().out
    assert main(["eval", "--metrics-only", str(p["gt"]), str(p["em"])]) == EXIT_USAGE
    assert main(["eval", "--metrics-only", str(p["gt"]), str(tmp_path / "none.rlc")]) \
        == EXIT_USAGE


def test_mismatched_raster_sizes(tmp_path):
    p = _pair(tmp_path)
    small = tmp_path / "small.rlc"
    write_raster(small, np.ones((64, 128), np.uint32), KIND_LABELS)
    assert main(["eval", "--metrics-only", str(p["gt"]), str(small)]) == EXIT_USAGE
    assert main(["run", "--mode", "sliding-static", "--oracle", "--small", "--em", str(p["em"]),
                 "--labels", str(small), "--gt", str(p["gt"]),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_run_with_oracle_improves(tmp_path, capsys):
    p = _pair(tmp_path)
    out = tmp_path / "run"
    code = main(["run", "--mode", "sliding-static", "--oracle", "--small", "--em", str(p["em"]),
                 "--labels", str(p["seg"]), "--gt", str(p["gt"]), "--out", str(out)])
    assert code == EXIT_OK
    gt = read_raster(p["gt"], KIND_LABELS)
    fixed = read_raster(out / "fixed_0000.rlc", KIND_LABELS)
    before = cremi_score(gt, read_raster(p["seg"], KIND_LABELS)).cremi
    assert cremi_score(gt, fixed).cremi < before
    assert "corrector_episodes" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["mode"] == "sliding_static" and manifest["wall_clock"] >= 0


def test_run_oracle_without_ground_truth(tmp_path):
    p = _pair(tmp_path)
    assert main(["run", "--mode", "sliding-static", "--oracle", "--small", "--em", str(p["em"]),
                 "--labels", str(p["seg"]), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_run_on_dataset(tmp_path):
    _gen(tmp_path / "data", "--seed", "1")
    code = main(["run", "--mode", "locator-selector", "--oracle", "--small",
                 "--data", str(tmp_path / "data"), "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    assert len(list((tmp_path / "o").glob("fixed_*.rlc"))) == len(read_dataset(tmp_path / "data"))


def test_train_order_is_enforced(tmp_path, capsys):
    code = main(["train", "--agent", "locator", "--out", str(tmp_path), "--small",
                 "--episodes", "1"])
    assert code == EXIT_USAGE
    assert "selector" in capsys.readouterr().err


def test_train_and_reuse_checkpoint(tmp_path, capsys):
    ck = tmp_path / "ck"
    args = ["train", "--agent", "splitter", "--out", str(ck), "--small", "--episodes", "4",
            "--pool", "4", "--segments", "30", "--seed", "2"]
    assert main(args) == EXIT_OK
    first = (ck / "splitter.rlcw").read_bytes()
    assert "episodes: 4" in capsys.readouterr().out
    assert main(args) == EXIT_OK
    assert (ck / "splitter.rlcw").read_bytes() == first
    capsys.readouterr()
    assert (ck / "manifest-splitter.json").exists()
    assert main(["eval", "--policies", str(ck), "--small", "--count", "3",
                 "--kinds", "merge", "--segments", "30", "--order", "splitter"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("testset\tbefore\tstatic\tselector")
    # checkpoints built for 32px patches do not fit the full geometry
    assert main(["eval", "--policies", str(ck), "--count", "1", "--kinds", "merge"]) \
        == EXIT_USAGE


def test_inject_writes_script(tmp_path, capsys):
    p = _pair(tmp_path)
    out, script = tmp_path / "seg2.rlc", tmp_path / "s.json"
    assert main(["inject", "--gt", str(p["gt"]), "--out", str(out), "--merges", "1",
                 "--script", str(script), "--seed", "3"]) == EXIT_OK
    assert json.loads(script.read_text())["seed"] == 3
    assert "cremi" in capsys.readouterr().out
    assert main(["inject", "--gt", str(p["gt"]), "--out", str(out)]) == EXIT_USAGE


def test_bench(tmp_path, capsys):
    code = main(["bench", "--oracle", "--small", "--count", "1", "--size", "128",
                 "--segments", "20", "--max-errors", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("mode\t") and len(lines) == 4


def test_runtime_fault_exit_code(tmp_path, monkeypatch):
    import proofrl.cli as cli

    def boom(args):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "cmd_gen", boom)
    parser_builder = cli.build_parser
    monkeypatch.setattr(cli, "build_parser", lambda: _rebind(parser_builder(), boom))
    assert main(["gen", "--out", str(tmp_path)]) == EXIT_FAULT


def _rebind(parser, func):
    parser._subparsers._group_actions[0].choices["gen"].set_defaults(func=func)
    return parser


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "proofrl", "eval"], capture_output=True,
                         text=True)
    assert res.returncode == EXIT_USAGE and "error" in res.stderr
