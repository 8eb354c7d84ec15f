import json

import pytest

from lexsparse.cli import DEFAULT_CONFIG, config_hash, main

SMALL = {
    "datagen": {"n_samples": 120, "n_test_combos": 12, "n_val": 8, "labeled_per_class": 2, "probe_train_per_class": 2},
    "model": {"d": 8, "depth": 1},
    "train": {"base_steps": 3, "batch_size": 8},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    c = str(cfg)
    assert main(["datagen", "--config", c, "--seed", "7", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", c, "--seed", "7", "--preset", "paper-desk", "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    assert main(["embed", "--config", c, "--checkpoint", str(root / "run" / "final.ckpt"), "--data", str(root / "data"),
                 "--out", str(root / "emb")]) == 0
    assert main(["index", "--embeddings", str(root / "emb" / "embeddings.tsv"), "--out", str(root / "ix")]) == 0
    return root, c


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_manifest_contents(work):
    root, _ = work
    m = manifest(root / "run")
    assert m["seed"] == 7 and m["command"] == "train"
    assert m["config_sha256"] == config_hash(m["config"])
    assert set(m["artifacts"]) >= {"final.ckpt", "train_log.tsv", "plan.json", "stage1_mask_text.ckpt"}
    assert "data" in m["inputs"]


def test_train_twice_identical_manifest(work, tmp_path):
    root, c = work
    assert main(["train", "--config", c, "--seed", "7", "--preset", "paper-desk", "--data", str(root / "data"),
                 "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (root / "run" / "manifest.json").read_bytes()


def test_rerun_from_manifest(work, tmp_path):
    root, _ = work
    assert main(["datagen", "--config", str(root / "data" / "manifest.json"), "--out", str(tmp_path / "d2")]) == 0
    assert manifest(tmp_path / "d2")["artifacts"] == manifest(root / "data")["artifacts"]


def test_search_schema(work, tmp_path, capsys):
    root, _ = work
    rc = main(["search", "--index", str(root / "ix"), "--query", "red square", "--k", "5",
               "--checkpoint", str(root / "run" / "final.ckpt"), "--out", str(tmp_path / "s")])
    assert rc == 0
    res = json.loads((tmp_path / "s" / "results.json").read_text())
    assert set(res) == {"query", "mode", "k", "normalize", "results"}
    assert res["mode"] == "encoder" and res["k"] == 5
    assert len(res["results"]) == 5
    for i, hit in enumerate(res["results"]):
        assert set(hit) == {"rank", "doc_id", "item", "score"}
        assert hit["rank"] == i + 1 and isinstance(hit["doc_id"], int) and hit["item"].startswith("test:")
    scores = [h["score"] for h in res["results"]]
    assert scores == sorted(scores, reverse=True)
    assert len(capsys.readouterr().out.splitlines()) == 5


def test_mask_search_needs_no_checkpoint(work, tmp_path):
    root, _ = work
    assert main(["search", "--index", str(root / "ix"), "--query", "a cat", "--mask", "--out", str(tmp_path / "m")]) == 0
    res = json.loads((tmp_path / "m" / "results.json").read_text())
    assert res["mode"] == "mask" and res["normalize"] is False
    assert main(["mask-search", "--index", str(root / "ix"), "--query", "a cat", "--out", str(tmp_path / "m2")]) == 0
    assert json.loads((tmp_path / "m2" / "results.json").read_text()) == res


@pytest.mark.parametrize("kind", ["retrieval", "zeroshot", "probe", "interp", "sparsity"])
def test_eval_kinds(work, tmp_path, kind):
    root, c = work
    out = tmp_path / kind
    assert main(["eval", kind, "--config", c, "--seed", "7", "--checkpoint", str(root / "run" / "final.ckpt"),
                 "--data", str(root / "data"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert kind in report
    assert "report.json" in manifest(out)["artifacts"]


def test_heatmap(work, tmp_path):
    root, c = work
    out = tmp_path / "hm"
    assert main(["heatmap", "--config", c, "--checkpoint", str(root / "run" / "final.ckpt"), "--data", str(root / "data"),
                 "--query", "cat", "--out", str(out)]) == 0
    hm = json.loads((out / "heatmap.json").read_text())
    assert len(hm["values"]) == 4 and len(hm["values"][0]) == 4
    assert (out / "heatmap.pgm").read_text().startswith("P2\n4 4\n")
    assert main(["heatmap", "--config", c, "--checkpoint", str(root / "run" / "final.ckpt"), "--data", str(root / "data"),
                 "--query", "", "--out", str(tmp_path / "bad")]) == 2
    assert not (tmp_path / "bad").exists()


def test_config_errors(tmp_path):
    assert main(["train", "--preset", "nope", "--out", str(tmp_path / "a")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "a")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"bogus": 1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "a")]) == 2
    bad.write_text("{not json")
    assert main(["datagen", "--config", str(bad), "--out", str(tmp_path / "a")]) == 2
    steps0 = tmp_path / "steps0.json"
    steps0.write_text(json.dumps({"train": {"base_steps": 0}}))
    assert main(["train", "--config", str(steps0), "--out", str(tmp_path / "a")]) == 2
    assert not (tmp_path / "a").exists()
    assert not [p for p in tmp_path.iterdir() if ".partial-" in p.name]


def test_runtime_error_leaves_no_partial_output(work, tmp_path):
    root, c = work
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(b"XXXX" + (root / "run" / "final.ckpt").read_bytes()[4:])
    out = tmp_path / "o"
    rc = main(["eval", "sparsity", "--config", c, "--checkpoint", str(corrupt), "--data", str(root / "data"), "--out", str(out)])
    assert rc == 3
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if ".partial-" in p.name]


def test_inputs_not_mutated(work, tmp_path):
    root, c = work
    before = {p.name: p.read_bytes() for p in (root / "data").iterdir()}
    main(["eval", "sparsity", "--config", c, "--checkpoint", str(root / "run" / "final.ckpt"), "--data", str(root / "data"),
          "--out", str(tmp_path / "e")])
    assert {p.name: p.read_bytes() for p in (root / "data").iterdir()} == before


def test_default_config_has_seed():
    assert DEFAULT_CONFIG["seed"] == 0 and DEFAULT_CONFIG["train"]["preset"] == "paper-desk"
