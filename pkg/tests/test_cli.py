import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from kgant import cli, data as D

SMALL = {"data": {"n_train": 12, "n_test": 4},
         "train": {"steps": 6, "batch_size": 4, "log_every": 3, "ckpt_every": 0}}


def write_config(path, extra=None):
    raw = {**SMALL, **(extra or {})}
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset plus one trained run of each flavour."""
    ws = tmp_path_factory.mktemp("cli")
    cfg = write_config(ws / "small.yaml")
    assert run("gen-data", "--config", cfg, "--dataset", ws / "ds") == 0
    assert run("train", "--config", cfg, "--dataset", ws / "ds", "--run-dir", ws / "kg") == 0
    assert run("train", "--config", cfg, "--dataset", ws / "ds", "--run-dir", ws / "nokg", "--no-kg") == 0
    return ws, cfg


def test_gen_data_deterministic_and_seeded(tmp_path, workspace):
    ws, cfg = workspace
    assert run("gen-data", "--config", cfg, "--dataset", tmp_path / "again") == 0
    assert tree_bytes(ws / "ds") == tree_bytes(tmp_path / "again")
    assert run("gen-data", "--config", cfg, "--dataset", tmp_path / "other", "--seed", 1) == 0
    assert tree_bytes(ws / "ds") != tree_bytes(tmp_path / "other")


def test_single_episode_split(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"data": {"n_train": 1, "n_test": 1}})
    assert run("gen-data", "--config", cfg, "--dataset", tmp_path / "ds") == 0
    ds = D.read_dataset(tmp_path / "ds")
    assert len(ds.splits["train"]) == 1 and len(ds.episodes) == 2


def test_manifest_grammar_hash_tracks_grammar(tmp_path):
    text = D.default_resource("kitchen_grammar.yaml").read_text()
    hashes = []
    for i, body in enumerate((text, text, text.replace("activities:", "# edited\nactivities:"))):
        g = tmp_path / f"g{i}.yaml"
        g.write_text(body)
        cfg = write_config(tmp_path / f"c{i}.yaml", {"paths": {"grammar": str(g)}})
        assert run("gen-data", "--config", cfg, "--dataset", tmp_path / f"ds{i}") == 0
        hashes.append(json.loads((tmp_path / f"ds{i}" / "manifest.json").read_text())["grammar_sha256"])
    assert hashes[0] == hashes[1] != hashes[2]


def test_train_outputs(workspace):
    ws, _ = workspace
    names = {p.name for p in (ws / "kg").iterdir()}
    assert {"final.ckpt", "best.ckpt", "curve.tsv", "config.yaml", "manifest.json"} <= names
    manifest = json.loads((ws / "kg" / "manifest.json").read_text())
    assert manifest["config"]["model"]["use_kg"] and manifest["n_params"] > 0
    assert manifest["code_version"].startswith("0.1.0+")


def test_train_deterministic(tmp_path, workspace):
    ws, cfg = workspace
    for name in ("a", "b"):
        assert run("train", "--config", cfg, "--dataset", ws / "ds", "--run-dir", tmp_path / name,
                   "--deterministic") == 0
    for f in ("final.ckpt", "best.ckpt", "curve.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_matches_uninterrupted(tmp_path, workspace):
    ws, cfg = workspace
    extra = {"train": {**SMALL["train"], "ckpt_every": 3}}
    cfg2 = write_config(tmp_path / "c.yaml", extra)
    assert run("train", "--config", cfg2, "--dataset", ws / "ds", "--run-dir", tmp_path / "r") == 0
    final = (tmp_path / "r" / "final.ckpt").read_bytes()
    curve = (tmp_path / "r" / "curve.tsv").read_bytes()
    assert run("train", "--config", cfg2, "--dataset", ws / "ds", "--run-dir", tmp_path / "r",
               "--resume", tmp_path / "r" / "step3.ckpt") == 0
    assert (tmp_path / "r" / "final.ckpt").read_bytes() == final
    assert (tmp_path / "r" / "curve.tsv").read_bytes() == curve


def test_eval_writes_report(tmp_path, workspace, capsys):
    ws, cfg = workspace
    assert run("eval", "--config", cfg, "--dataset", ws / "ds", "--run-dir", ws / "kg", "--out", tmp_path) == 0
    assert "MoC" in capsys.readouterr().out
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["grid"]) == 8
    rows = [json.loads(x) for x in (tmp_path / "predictions.jsonl").read_text().splitlines()]
    assert rows and all(len(r["pred"]) == len(r["true"]) for r in rows)


def test_eval_alpha_beta_flags(tmp_path, workspace):
    ws, cfg = workspace
    assert run("eval", "--config", cfg, "--dataset", ws / "ds", "--run-dir", ws / "kg", "--out", tmp_path,
               "--alpha", "10%", "--beta", "0.3") == 0
    grid = json.loads((tmp_path / "report.json").read_text())["grid"]
    assert [(g["alpha"], g["beta"]) for g in grid] == [(0.1, 0.3)]


def predict(tmp_path, ws, cfg, run_dir, *extra):
    ep = D.read_dataset(ws / "ds").splits["test"][0]
    out = tmp_path / f"{run_dir}.json"
    assert run("predict", "--config", cfg, "--dataset", ws / "ds", "--run-dir", ws / run_dir,
               "--episode", ep, "--out", out, *extra) == 0
    return json.loads(out.read_text())


def test_predict_dump_consistent_with_decoder(tmp_path, workspace, grammar):
    ws, cfg = workspace
    dump = predict(tmp_path, ws, cfg, "kg")
    frames = D.decode_durations(np.array(dump["d_pred"]), np.array(dump["a_pred"]), dump["model_horizon"])
    expected = [[grammar.class_names[a], n] for a, n in D.segments_from_labels(frames[:dump["horizon"]])]
    assert dump["predicted"] == expected
    assert sum(n for _, n in dump["truth"]) == dump["horizon"]
    assert sum(n for _, n in dump["observed"]) == dump["n_obs"]


def test_predict_no_kg_has_identity_rectification(tmp_path, workspace):
    ws, cfg = workspace
    dump = predict(tmp_path, ws, cfg, "nokg", "--no-kg")
    assert not dump["use_kg"] and dump["active_nodes"] == []
    d_k = len(dump["r_enc"])
    assert np.array_equal(dump["r_enc"], np.eye(d_k)) and np.array_equal(dump["r_dec"], np.eye(d_k))
    kg_dump = predict(tmp_path, ws, cfg, "kg")
    assert not np.allclose(kg_dump["r_enc"], np.eye(d_k))


def test_inspect_graph(tmp_path, workspace):
    ws, cfg = workspace
    out = tmp_path / "g.json"
    ep = D.read_dataset(ws / "ds").splits["test"][0]
    assert run("inspect-graph", "--config", cfg, "--dataset", ws / "ds", "--run-dir", ws / "kg",
               "--episode", ep, "--out", out) == 0
    info = json.loads(out.read_text())
    assert len(info["nodes"]) > 10 and info["edges"]
    win = info["window"]
    rounds = {a["name"]: a["round"] for a in win["active"]}
    assert all(rounds.get(name) == 0 for name in win["detected"] if name in rounds)


@pytest.mark.parametrize("argv,code", [
    (["eval", "--config", "/nonexistent.yaml"], 3),
    (["train", "--dataset", "/nonexistent"], 4),
])
def test_exit_codes(argv, code):
    assert run(*argv) == code


def test_exit_codes_for_bad_inputs(tmp_path, workspace, episodes):
    ws, cfg = workspace
    D.write_dataset(tmp_path / "bare", episodes[:1], {"train": [episodes[0].id]}, {})
    assert run("train", "--config", cfg, "--dataset", tmp_path / "bare") == 4
    assert run("predict", "--config", cfg, "--dataset", ws / "ds", "--run-dir", ws / "kg",
               "--episode", "nope") == 4
    bad = write_config(tmp_path / "d.yaml", {"model": {"d_model": 16, "n_heads": 2}})
    assert run("eval", "--config", bad, "--dataset", ws / "ds", "--run-dir", ws / "kg") == 3
    (tmp_path / "junk.yaml").write_text("train: {stepz: 3}\n")
    assert run("train", "--config", tmp_path / "junk.yaml") == 3
    with pytest.raises(SystemExit) as exc:
        run("train", "--alpha", "seven")
    assert exc.value.code == 2


def test_eval_of_overfit_checkpoint_is_perfect(tmp_path, grammar, graph):
    ep = D.generate(grammar, 1, seed=0, graph=graph)[0]
    D.write_dataset(tmp_path / "ds", [ep], {"train": [ep.id], "test": [ep.id]},
                    {"seed": 0, "classes": grammar.class_names})
    cfg = write_config(tmp_path / "c.yaml", {
        "train": {"steps": 500, "batch_size": 4, "lr": 0.003, "warmup": 10, "train_alphas": [0.1],
                  "log_every": 100, "ckpt_every": 0}})
    assert run("train", "--config", cfg, "--dataset", tmp_path / "ds", "--run-dir", tmp_path / "run") == 0
    assert run("eval", "--config", cfg, "--dataset", tmp_path / "ds", "--run-dir", tmp_path / "run",
               "--alpha", "0.1", "--beta", "0.3") == 0
    rep = json.loads((tmp_path / "run" / "eval" / "report.json").read_text())
    assert rep["grid"][0]["moc"] >= 95.0


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "kgant.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for verb in cli.VERBS:
        assert verb in out.stdout
