import csv
import json
from dataclasses import replace

import pytest

from uapcl.cli import EXIT_INCOMPLETE, EXIT_INVALID, EXIT_OK, EXIT_UNCONVERGED, main
from uapcl.experiment import default_domains, desk_experiment


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """A two-domain config small enough to train in a couple of seconds."""
    root = tmp_path_factory.mktemp("cli")
    cfg = desk_experiment(0, "uap_feature", order=(1, 2))
    cfg.domains = default_domains(0, n_train=(24, 24), n_dev=(8, 8), n_eval=(8, 8))[:2]
    cfg.stage = replace(cfg.stage, epochs=2)
    cfg.uap = replace(cfg.uap, max_iters=50)
    cfg.data_dir = str(root / "data")
    path = root / "tiny.json"
    cfg.save(path)
    assert main(["train", "--config", str(path), "--domain", "1", "--out", str(root / "base")]) == EXIT_OK
    return root, path


def test_config_round_trip(tmp_path, capsys):
    out = tmp_path / "c.json"
    assert main(["config", "--seed", "3", "--strategy", "uap-feature", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["seed"] == 3 and doc["strategy"] == "uap_feature"
    assert main(["config"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["strategy"] == "sft"


def test_synth_writes_data(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps([d.to_dict() for d in default_domains(0, (4, 4), (2, 2), (2, 2))[:1]]))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == EXIT_OK
    assert (tmp_path / "d" / "extractor.uft").exists()
    spec.write_text("[]")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "e")]) == EXIT_INVALID


def test_train_and_eval(tiny, tmp_path):
    root, _ = tiny
    ckpt = root / "base" / "stage_1" / "model.ufckpt"
    assert ckpt.exists()
    out = tmp_path / "eval.json"
    assert main(["eval", "--ckpt", str(ckpt), "--domain", "1", "--data", str(root / "data"),
                 "--json-out", str(out)]) == EXIT_OK
    res = json.loads(out.read_text())
    assert res["domain"] == 1 and 0.0 <= res["eer"] <= 100.0


def test_sequence_joint_and_report(tiny, capsys):
    root, path = tiny
    code = main(["sequence", "--config", str(path), "--strategy", "uap-feature", "--out", str(root / "seq")])
    assert code in (EXIT_OK, EXIT_UNCONVERGED)
    meta = json.loads((root / "seq" / "stage_1" / "metrics.json").read_text())["uap"]
    assert code == (EXIT_OK if meta["converged"] else EXIT_UNCONVERGED)
    assert main(["joint", "--config", str(path), "--out", str(root / "joint")]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", "--run", str(root / "seq"), "--format", "csv"]) == EXIT_OK
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 3
    assert main(["report", "--run", str(root / "seq"), "--from-json", "--format", "csv"]) == EXIT_OK
    assert list(csv.reader(capsys.readouterr().out.splitlines())) == rows
    assert main(["report", "--run", str(root / "seq"), "--run", str(root / "joint")]) == EXIT_OK


def test_gen_uap_exit_codes(tiny, tmp_path):
    root, _ = tiny
    ckpt = str(root / "base" / "stage_1" / "model.ufckpt")
    feats = str(root / "data" / "domain_1" / "train.uffeat")
    ok = main(["gen-uap", "--ckpt", ckpt, "--features", feats, "--epsilon", "0.5", "--alpha", "0.05",
               "--out", str(tmp_path / "pool")])
    assert ok == EXIT_OK
    assert (tmp_path / "pool" / "manifest.json").exists()
    with pytest.warns(RuntimeWarning):
        bad = main(["gen-uap", "--ckpt", ckpt, "--features", feats, "--epsilon", "1e-4", "--alpha", "1e-5",
                    "--max-iters", "3", "--stage", "2", "--out", str(tmp_path / "pool")])
    assert bad == EXIT_UNCONVERGED
    assert main(["gen-uap", "--ckpt", ckpt, "--out", str(tmp_path / "p2")]) == EXIT_INVALID


def test_dump_embeddings(tiny, tmp_path):
    root, _ = tiny
    ckpt = str(root / "base" / "stage_1" / "model.ufckpt")
    out = tmp_path / "emb.csv"
    assert main(["dump-embeddings", "--ckpt", ckpt, "--domain", "1", "--data", str(root / "data"),
                 "--out", str(out)]) == EXIT_OK
    with open(out) as fh:
        assert next(csv.reader(fh))[:3] == ["id", "domain", "label"]


def test_invalid_inputs(tiny, tmp_path):
    _, path = tiny
    assert main(["sequence", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert main(["sequence", "--config", str(path), "--order", "1,7", "--out", str(tmp_path / "y")]) == EXIT_INVALID
    assert main(["sequence", "--config", str(path), "--order", "1,1", "--out", str(tmp_path / "z")]) == EXIT_INVALID
    with pytest.raises(SystemExit):
        main(["sequence", "--config", str(path), "--order", "a,b", "--out", str(tmp_path / "w")])


def test_report_on_incomplete_run(tmp_path):
    (tmp_path / "run").mkdir()
    assert main(["report", "--run", str(tmp_path / "run")]) == EXIT_INCOMPLETE
