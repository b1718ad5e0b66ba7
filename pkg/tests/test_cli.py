import csv

from maplab.analysis import CSV_HEADER, read_results
from maplab.cli import build_parser, main

SMALL = ["--set", "blobs_classes=4", "--set", "blobs_n=256", "--set", "blobs_test_n=200", "--set", "blobs_size=6",
         "--set", "batch_size=32", "--set", "blobs_spread=0.15"]


def test_parser_has_all_commands():
    parser = build_parser()
    for cmd in ("train-teacher", "train-student", "sweep", "analyze", "plot"):
        assert parser.parse_args([cmd] + {"train-teacher": ["--target", "0.5"], "sweep": ["early_stage"],
                                          "analyze": ["r.csv"], "plot": ["r.csv"]}.get(cmd, []))
    args = parser.parse_args(["train-teacher", "--target", "0.5", "--tol", "0.01"])
    assert args.target == [0.5] and args.tol == 0.01


def test_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("lr: 1e-4\naug_kind: NoAug\nsteps: 40\neval_every: 20\nseed: 5\n")
    bank = tmp_path / "bank"
    assert main(["train-teacher", "--config", str(cfg), *SMALL, "--target", "0.6", "--tol", "0.03",
                 "--val-every", "10", "--max-steps", "300", "--out", str(bank)]) == 0
    with open(bank / "bank.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["path", "target", "achieved", "aug", "seed", "step"]

    single = tmp_path / "single.csv"
    assert main(["train-student", "--config", str(cfg), *SMALL, "--seed", "2", "--out", str(single)]) == 0
    rows = read_results(single)
    assert [r.step for r in rows] == [20, 40] and rows[0].seed == 2

    results = tmp_path / "res.csv"
    assert main(["sweep", "strategy_compare", *SMALL, "--steps", "20", "--set", "eval_every=10",
                 "--teachers", "0.6", "--seeds", "0,1", "--bank", str(bank), "--out", str(results)]) == 0
    # the bank holds a NoAug teacher while the preset asks for StdAug teachers
    assert "skipped" in capsys.readouterr().err
    assert main(["sweep", "strategy_compare", *SMALL, "--steps", "20", "--set", "eval_every=10",
                 "--teachers", "0.6", "--teacher-augs", "NoAug", "--seeds", "0,1", "--bank", str(bank),
                 "--out", str(results)]) == 0
    assert "skipped" not in capsys.readouterr().err
    assert results.read_text().split("\n", 1)[0] == CSV_HEADER
    assert {r.strategy for r in read_results(results)} == {"A", "B", "C"}

    assert main(["analyze", str(results)]) == 0
    assert main(["plot", str(results), "--outdir", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "strategy_compare__step-vs-top1.png").exists()


def test_dry_run(capsys):
    assert main(["sweep", "strategy_compare", "--teachers", "0.2,0.5,0.8", "--seeds", "0,1", "--dry-run"]) == 0
    assert capsys.readouterr().out.strip().endswith("14 runs")


def test_unreachable_teacher_exit_code(tmp_path):
    assert main(["train-teacher", *SMALL, "--target", "0.99", "--tol", "0.0", "--max-steps", "5",
                 "--out", str(tmp_path / "t.pt")]) == 1


def test_bad_override_is_reported(capsys):
    assert main(["train-student", "--set", "bogus=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err
