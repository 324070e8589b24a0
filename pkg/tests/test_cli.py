import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadlab import cli
from tadlab import eval as ev
from tadlab.core import ValidationError, load_dataset
from tadlab.detectors import make_detector, read_scores


def write_manifest(path, **overrides):
    body = {
        "version": 1,
        "seed": 0,
        "datasets": [{"toy": {"name": "ring", "n_normal": 120, "seed": 0}}],
        "detectors": {"knn": [{"k": 5}]},
    }
    body.update(overrides)
    path.write_text(json.dumps(body))
    return path


TINY_PRETEXT = {
    "tasks": [{"kind": "rotation", "losses": ["cross_entropy"], "config": {"C": 2}}],
    "draws": 1,
    "epochs": 2,
    "patience": 2,
}


@pytest.fixture(autouse=True)
def _no_env_cache(monkeypatch):
    monkeypatch.delenv(cli.CACHE_ENV, raising=False)


# manifest validation -----------------------------------------------------------


def test_single_toy_knn_no_pretext_gives_one_cell(tmp_path):
    m = write_manifest(tmp_path / "m.json")
    report = cli.run_manifest(m, out_dir=tmp_path / "out")
    assert report.values.shape == (1, 1)
    assert not np.isnan(report.values[0, 0])
    assert report.ok
    names, methods, V = ev.read_score_table((tmp_path / "out" / "scores.csv").read_text())
    assert names == ["toy_ring|original|knn(k=5)"] and methods == ["raw"]


def test_missing_file_fails_validation_without_outputs(tmp_path):
    m = write_manifest(tmp_path / "m.json", datasets=[{"path": "nope.csv"}])
    with pytest.raises(ValidationError, match="not found"):
        cli.run_manifest(m, out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"version": 2},
        {"detectors": {}},
        {"detectors": {"svm": [{}]}},
        {"detectors": {"knn": []}},
        {"detectors": {"knn": [{"k": 5, "kk": 1}]}},
        {"datasets": []},
        {"pretext": {"tasks": [{"kind": "rotation", "losses": ["mse"]}]}},
        {"pretext": {"tasks": [{"kind": "rotation", "losses": []}]}},
        {"subspace_fractions": [0.0]},
    ],
)
def test_schema_violations_rejected(tmp_path, patch):
    m = write_manifest(tmp_path / "m.json", **patch)
    with pytest.raises(ValidationError):
        cli.run_manifest(m, out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_seed_is_required(tmp_path):
    body = json.loads(write_manifest(tmp_path / "m.json").read_text())
    del body["seed"]
    (tmp_path / "m.json").write_text(json.dumps(body))
    with pytest.raises(ValidationError, match="seed"):
        cli.load_manifest(tmp_path / "m.json")


def test_relative_dataset_paths_resolve_against_manifest(tmp_path):
    assert cli.main(["toy", "--name", "moons", "--n-normal", "60", "--out", str(tmp_path / "moons.csv")]) == 0
    m = write_manifest(tmp_path / "m.json", datasets=[{"path": "moons.csv"}])
    report = cli.run_manifest(m, out_dir=tmp_path / "out")
    assert report.rows == ["moons|original|knn(k=5)"]


def test_reference_manifest_validates():
    m = cli.load_manifest(cli.reference_manifest_path())
    assert len(m.representations()) >= 3 and m.datasets


# run behaviour -----------------------------------------------------------------


def test_failed_cells_recorded_and_partial_results_written(tmp_path):
    m = write_manifest(tmp_path / "m.json", detectors={"knn": [{"k": 5}], "lof": [{"k": 10000}]})
    report = cli.run_manifest(m, out_dir=tmp_path / "out")
    assert len(report.failed) == 1 and "lof(k=10000)" in report.failed[0]
    assert (tmp_path / "out" / "scores.csv").exists()
    assert cli.main(["run", "--manifest", str(m), "--out", str(tmp_path / "out2")]) == 1


def test_resume_hits_cache_and_keeps_bytes(tmp_path):
    m = write_manifest(tmp_path / "m.json", pretext=TINY_PRETEXT, subspace_fractions=[1.0, 0.5])
    out = tmp_path / "out"
    first = cli.run_manifest(m, out_dir=out)
    assert first.stats["trained"] == 1 and first.stats["cache_hits"] == 0
    table = (out / "scores.csv").read_bytes()
    rep = (out / "report.json").read_bytes()
    second = cli.run_manifest(m, resume=True, out_dir=out)
    assert second.stats["trained"] == 0 and second.stats["cache_hits"] == 2
    assert (out / "scores.csv").read_bytes() == table
    assert (out / "report.json").read_bytes() == rep


def test_cache_env_var_overrides_location(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "elsewhere"))
    m = write_manifest(tmp_path / "m.json", pretext=TINY_PRETEXT)
    cli.run_manifest(m, out_dir=tmp_path / "out")
    assert list((tmp_path / "elsewhere").glob("enc-*.bin"))
    assert not (tmp_path / "out" / "cache").exists()


def test_seed_override_changes_results_deterministically(tmp_path):
    m = write_manifest(tmp_path / "m.json", detectors={"iforest": [{"n_trees": 20, "subsample": 32}]})
    a = cli.run_manifest(m, out_dir=tmp_path / "a", seed=3)
    b = cli.run_manifest(m, out_dir=tmp_path / "b", seed=3)
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert json.loads((tmp_path / "a" / "report.json").read_text())["seed"] == 3
    np.testing.assert_array_equal(a.values, b.values)


def test_logs_are_json_lines(tmp_path):
    m = write_manifest(tmp_path / "m.json")
    cli.run_manifest(m, out_dir=tmp_path / "out")
    lines = (tmp_path / "out" / "log.jsonl").read_text().splitlines()
    events = [json.loads(line) for line in lines]
    assert all("ts" in e and "event" in e for e in events)
    assert "ts" not in (tmp_path / "out" / "report.json").read_text()


def test_report_cells_traceable(tmp_path):
    m = write_manifest(tmp_path / "m.json", synthesis={"kinds": ["global"]})
    cli.run_manifest(m, out_dir=tmp_path / "out")
    body = json.loads((tmp_path / "out" / "report.json").read_text())
    assert {c["variant"] for c in body["cells"]} == {"original", "synth:global"}
    for c in body["cells"]:
        assert {"dataset", "detector", "representation", "seed", "auroc"} <= set(c)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=12),
    st.integers(0, 2**31),
    st.sampled_from(["rotation", "shuffle"]),
)
def test_cache_key_changes_with_data_config_and_seed(vals, seed, task):
    X = np.array(vals)[:, None]
    base = cli.cache_key([X], {"task": task}, seed)
    assert base == cli.cache_key([X.copy()], {"task": task}, seed)
    X2 = X.copy()
    X2[0, 0] = np.nextafter(X2[0, 0], np.inf)
    assert cli.cache_key([X2], {"task": task}, seed) != base
    assert cli.cache_key([X], {"task": task, "draws": 1}, seed) != base
    assert cli.cache_key([X], {"task": task}, seed + 1) != base


# subcommands -------------------------------------------------------------------


def test_toy_subcommand_writes_labelled_2d_csv(tmp_path):
    out = tmp_path / "ring.csv"
    assert cli.main(["toy", "--name", "ring", "--seed", "1", "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert ds.d == 2 and ds.n_anomalies > 0
    assert out.read_text().splitlines()[0] == "x0,x1,label"


def test_detect_then_eval_matches_library(tmp_path, capsys):
    t, q, s = tmp_path / "t.csv", tmp_path / "q.csv", tmp_path / "s.csv"
    cli.main(["toy", "--name", "gaussians", "--seed", "0", "--n-normal", "80", "--out", str(t)])
    cli.main(["toy", "--name", "gaussians", "--seed", "1", "--n-normal", "80", "--out", str(q)])
    assert cli.main(["detect", "--kind", "knn", "--k", "5", "--train", str(t), "--test", str(q), "--out", str(s)]) == 0
    train, test = load_dataset(t), load_dataset(q)
    expected = make_detector("knn", k=5).fit(train.X).score(test.X)
    np.testing.assert_array_equal(read_scores(s)[1], expected)
    capsys.readouterr()
    assert cli.main(["eval", "--scores", str(s), "--labels", str(q)]) == 0
    printed = float(capsys.readouterr().out.strip())
    assert printed == ev.auroc(expected, test.y)


def test_detect_to_stdout(tmp_path, capsys):
    t = tmp_path / "t.csv"
    cli.main(["toy", "--name", "moons", "--n-normal", "60", "--out", str(t)])
    capsys.readouterr()
    assert cli.main(["detect", "--kind", "residual_norm", "--fraction", "0.5", "--train", str(t), "--test", str(t)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "row_id,score" and len(lines) == 1 + 63


def test_ingest_split_synth_corrupt_chain(tmp_path, capsys):
    data = tmp_path / "d.csv"
    cli.main(["toy", "--name", "multi_gaussians", "--n-normal", "200", "--out", str(data)])
    assert cli.main(["ingest", "--data", str(data)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n"] == 210 and summary["d"] == 2
    split = tmp_path / "split.json"
    assert cli.main(["split", "--data", str(data), "--seed", "2", "--out", str(split)]) == 0
    sp = json.loads(split.read_text())
    assert len(sp["train"]) + len(sp["val"]) == 100

    anomalies = tmp_path / "a.csv"
    assert cli.main(["synth", "--kind", "cluster", "--data", str(data), "--split", str(split), "--n", "30",
                     "--out", str(anomalies)]) == 0  # fmt: skip
    a = np.loadtxt(anomalies, delimiter=",", skiprows=1, ndmin=2)
    assert a.shape == (30, 3) and np.all(a[:, -1] == 1)
    gen = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert gen["kind"] == "cluster" and gen["source_sha256"] == load_dataset(data).checksum

    out = tmp_path / "corr"
    assert cli.main(["corrupt", "--kind", "add_uninformative", "--data", str(data), "--split", str(split),
                     "--proportion", "1.0", "--out", str(out)]) == 0  # fmt: skip
    tr = load_dataset(out / "train.csv")
    assert tr.d == 4 and tr.n == len(sp["train"])


def test_train_embed_roundtrip(tmp_path):
    data = tmp_path / "d.csv"
    cli.main(["toy", "--name", "spiral", "--n-normal", "80", "--out", str(data)])
    enc = tmp_path / "enc.bin"
    args = ["train", "--task", "autoencoder", "--loss", "mae", "--train", str(data), "--val", str(data),
            "--draws", "1", "--epochs", "2", "--out", str(enc)]  # fmt: skip
    assert cli.main(args) == 0
    assert (tmp_path / "enc.bin.curve.csv").read_text().startswith("epoch,train_loss,val_loss")
    emb = tmp_path / "e.csv"
    assert cli.main(["embed", "--encoder", str(enc), "--data", str(data), "--out", str(emb)]) == 0
    E = load_dataset(emb)
    assert E.d == 128 and E.n == 84
    proj = tmp_path / "p.csv"
    assert cli.main(["embed", "--encoder", str(enc), "--data", str(data), "--fraction", "0.25", "--out", str(proj)]) == 0
    assert load_dataset(proj).d == 32


def test_report_subcommand(tmp_path):
    rng = np.random.default_rng(0)
    V = rng.uniform(50, 100, size=(8, 3))
    table = tmp_path / "t.csv"
    table.write_text(ev.score_table_csv([f"r{i}" for i in range(8)], ["a", "b", "c"], V))
    assert cli.main(["report", "--scores", str(table), "--out", str(tmp_path / "rep")]) == 0
    ranks = json.loads((tmp_path / "rep" / "ranks.json").read_text())
    assert ranks["n_rows"] == 8
    assert (tmp_path / "rep" / "auroc_boxplot.svg").exists()


def test_validation_error_exit_code(tmp_path, capsys):
    m = write_manifest(tmp_path / "m.json", extra=True)
    assert cli.main(["--manifest", str(m), "--out", str(tmp_path / "o")]) == 2
    assert "validation error" in capsys.readouterr().err
