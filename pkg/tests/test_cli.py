import json
import threading

import pytest

from raywatch import cli, sentinel
from raywatch.imagery import read_manifest


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-dataset")
    rc = cli.main([
        "synth", "--count-valid", "30", "--count-anomalous", "4", "--seed", "6",
        "--out", str(out), "--height", "32", "--width", "48",
        "--shell", "0.26", "--lobe", "0.14", "--noise", "0.0",
        "--ray-length", "18", "--ray-width", "9", "--drift", "0.1", "--static-texture",
    ])
    assert rc == 0
    return out / "manifest.txt"


@pytest.fixture(scope="module")
def cli_bundle(cli_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("cli-bundle") / "bundle.fmc"
    rc = cli.main([
        "train", "--manifest", str(cli_dataset), "--out", str(path),
        "--model", "iforest", "--no-pca", "--trees", "50", "--seed", "106",
    ])
    assert rc == 0
    return path


def test_synth_writes_dataset(cli_dataset):
    entries = read_manifest(cli_dataset)
    assert len(entries) == 34
    assert all(path.exists() for path, _ in entries)


def test_eval_prints_table(cli_bundle, cli_dataset, capsys, tmp_path):
    jsonl = tmp_path / "report.jsonl"
    rc = cli.main(["eval", "--bundle", str(cli_bundle), "--manifest", str(cli_dataset),
                   "--jsonl", str(jsonl)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "correct_valid" in out and "overall" in out
    lines = [json.loads(line) for line in jsonl.read_text().splitlines()]
    assert len(lines) == 34


def test_eval_pool_subsets(cli_bundle, cli_dataset, capsys):
    rc = cli.main(["eval", "--bundle", str(cli_bundle), "--manifest", str(cli_dataset),
                   "--pool", "6,2", "--pool-seed", "3"])
    assert rc == 0
    assert "correct_valid" in capsys.readouterr().out


def test_flips_reports_each_axis(cli_bundle, cli_dataset, capsys):
    rc = cli.main(["flips", "--bundle", str(cli_bundle), "--manifest", str(cli_dataset),
                   "--axes", "horizontal,vertical"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "[horizontal]" in out and "[vertical]" in out


def test_online_emits_records_and_plot_data(cli_dataset, capsys, tmp_path):
    jsonl = tmp_path / "records.jsonl"
    plot = tmp_path / "plot.csv"
    rc = cli.main(["online", "--manifest", str(cli_dataset), "--start", "28", "--trees", "25",
                   "--warmup", "30", "--seed", "2", "--jsonl", str(jsonl), "--plot-data", str(plot)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "first-unseen accuracy" in out
    assert plot.read_text().splitlines()[0] == "step,percent_correct,first_unseen_correct"
    records = [json.loads(line) for line in jsonl.read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(28, 35))


def test_tune_prints_history(cli_dataset, capsys, tmp_path):
    jsonl = tmp_path / "trials.jsonl"
    rc = cli.main(["tune", "--manifest", str(cli_dataset), "--model", "iforest",
                   "--budget", "2", "--seed", "4", "--components", "8", "--pool", "6,2",
                   "--jsonl", str(jsonl)])
    assert rc == 0
    assert "best: trial" in capsys.readouterr().out
    assert len(jsonl.read_text().splitlines()) == 2


def test_serve_and_drive_against_endpoint(cli_bundle, tmp_path, capsys):
    from raywatch.seeding import derive_seed

    server = sentinel.SentinelServer(cli_bundle, "127.0.0.1:0")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        # generator flags mirror the training set so clean frames stay clean
        rc = cli.main(["drive", "--steps", "6", "--checkpoint-every", "3", "--seed", "8",
                       "--detector", f"endpoint:{server.endpoint}",
                       "--workdir", str(tmp_path / "frames"),
                       "--height", "32", "--width", "48",
                       "--shell", "0.26", "--lobe", "0.14", "--noise", "0.0",
                       "--static-texture", "--texture-seed", str(derive_seed(6, 0, 1))])
    finally:
        server.shutdown()
        thread.join(timeout=5)
    assert rc == 0
    out = capsys.readouterr()
    assert "completed 6 steps" in out.err


def test_drive_detector_spec_validation(capsys):
    rc = cli.main(["drive", "--steps", "2", "--detector", "nonsense"])
    assert rc == 1
    assert "bundle:PATH or endpoint:ADDR" in capsys.readouterr().err


def test_error_paths_return_nonzero(tmp_path, capsys):
    rc = cli.main(["train", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "b.fmc")])
    assert rc != 0
