import json

from marp.cli import main


def test_gen_solve_run_replay(tmp_path, capsys):
    assert main(["gen", "--family", "small2a", "--count", "2", "--out", str(tmp_path)]) == 0
    scen = tmp_path / "small2a-rational-0.scen"
    assert scen.exists() and (tmp_path / "small2a-rational-0.map").exists()
    capsys.readouterr()

    assert main(["solve", "--map", str(tmp_path / "small2a-rational-0.map"), "--agents", str(scen), "--w", "0.2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("0:(") and out[-1].startswith("sum_of_costs ")

    dump = tmp_path / "rec.json"
    assert main(["run", "--scenario", str(scen), "--planner", "safe", "--render", "--dump", str(dump)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("t=0") and "status=" in out
    assert "map_text" in json.loads(dump.read_text())["scenario"]

    assert main(["replay", str(dump)]) == 0
    assert capsys.readouterr().out.startswith("match")


def test_bench_and_plot_data(tmp_path, capsys):
    cfg = tmp_path / "suite.yaml"
    cfg.write_text("family: tiny2a\nplanners: [astar, safe]\nruns: 2\n")
    csv_path = tmp_path / "out.csv"
    assert main(["bench", str(cfg), "--out", str(csv_path), "--no-timings"]) == 0
    assert csv_path.read_text().startswith("scenario_family,opponent_class,planner,runs,")
    assert main(["plot-data", str(csv_path)]) == 0
    assert capsys.readouterr().out.startswith("scenario_family,planner,class,metric,value")


def test_bad_input_reports_error(tmp_path, capsys):
    assert main(["solve", "--agents", str(tmp_path / "missing.scen")]) == 2
    assert "marp solve" in capsys.readouterr().err
