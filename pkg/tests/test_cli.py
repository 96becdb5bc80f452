import hashlib

import numpy as np
import pytest

from triretrieval import cli
from triretrieval import datamodel as dm
from triretrieval.retrieval import import_embeddings

SMALL = ["--set", "synth.num_categories=6", "--set", "synth.instances_per_category=4",
         "--set", "mcfa.epochs_per_stage=2", "--set", "train.batch_size=6",
         "--set", "optimizer.learning_rate=1e-3"]


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_writes_default_sized_manifest(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path)]) == 0
    table = dm.load_manifest(tmp_path / "manifest.jsonl")
    assert len(table) == 512 and table.splits() == {"train", "test"}
    assert "512" in capsys.readouterr().out


def test_synth_round_trip_and_seed_sensitivity(tmp_path, desk_config):
    table = cli.cmd_synth(desk_config, tmp_path / "a.jsonl")
    assert dm.load_manifest(tmp_path / "a.jsonl").equals(table)
    cli.cmd_synth(desk_config, tmp_path / "b.jsonl")
    cli.cmd_synth(desk_config.with_overrides(seed=1), tmp_path / "c.jsonl")
    assert _digest(tmp_path / "a.jsonl") == _digest(tmp_path / "b.jsonl")
    assert _digest(tmp_path / "a.jsonl") != _digest(tmp_path / "c.jsonl")


def test_global_flags_before_or_after_subcommand(tmp_path):
    assert cli.main(["--seed", "3", "--out", str(tmp_path / "x"), "synth"]) == 0
    assert cli.main(["synth", "--seed", "3", "--out", str(tmp_path / "y")]) == 0
    assert _digest(tmp_path / "x" / "manifest.jsonl") == _digest(tmp_path / "y" / "manifest.jsonl")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    assert cli.main(["train", "--out", str(out), *SMALL]) == 0
    assert cli.main(["synth", "--out", str(out), *SMALL]) == 0
    return out


def test_train_outputs(small_run):
    names = {p.name for p in small_run.iterdir()}
    assert {"model.ckpt", "stage1_sketch.ckpt", "stage2_image.ckpt", "stage3_text.ckpt",
            "losses.csv", "timing.csv", "stages.csv", "config.yaml"} <= names
    rows = (small_run / "losses.csv").read_text().splitlines()
    assert rows[0] == "stage,modality,epoch,aaml,infonce,triplet,total"
    assert len(rows) == 1 + 3 * 2


def test_train_with_plot(tmp_path):
    pytest.importorskip("matplotlib")
    assert cli.main(["train", "--out", str(tmp_path), *SMALL, "--set", "output.plots=true"]) == 0
    assert (tmp_path / "losses.png").read_bytes()[:4] == b"\x89PNG"


def test_eval_table(small_run, capsys):
    args = ["eval", "--checkpoint", str(small_run / "model.ckpt"),
            "--manifest", str(small_run / "manifest.jsonl"), "--out", str(small_run)]
    assert cli.main(args) == 0
    lines = (small_run / "eval.csv").read_text().splitlines()
    assert lines[0] == "query,R@1,R@5,R@10"
    assert [l.split(",")[0] for l in lines[1:]] == ["fused", "sketch", "text"]
    for line in lines[1:]:
        r1, r5, r10 = map(float, line.split(",")[1:])
        assert r1 <= r5 <= r10
    assert "fused" in capsys.readouterr().out


def test_eval_dim_mismatch(small_run, tmp_path, capsys):
    other = dm.synthesize_dataset(dm.SynthConfig(num_categories=3, instances_per_category=2,
                                                 view_dims=(5, 32, 32)))
    dm.write_manifest(other, tmp_path / "o.jsonl")
    rc = cli.main(["eval", "--checkpoint", str(small_run / "model.ckpt"),
                   "--manifest", str(tmp_path / "o.jsonl"), "--split", "all"])
    assert rc == 1
    assert "sketch encoder expects" in capsys.readouterr().err


def _views(small_run, iid):
    table = dm.load_manifest(small_run / "manifest.jsonl")
    s = next(x for x in table.samples if x.instance_id == iid)
    return ",".join(repr(float(v)) for v in s.sketch_view), ",".join(repr(float(v)) for v in s.text_view)


def test_retrieve(small_run, capsys):
    sk, tx = _views(small_run, 3)
    args = ["retrieve", "--checkpoint", str(small_run / "model.ckpt"),
            "--manifest", str(small_run / "manifest.jsonl"), "--sketch", sk, "--text", tx]
    assert cli.main(args + ["-k", "1"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 2  # header + one row
    hits = cli.cmd_retrieve(small_run / "model.ckpt", small_run / "manifest.jsonl", sk, tx, 5)
    assert len(hits) == 5
    assert [s for _, s in hits] == sorted((s for _, s in hits), reverse=True)


def test_retrieve_malformed_vector_is_usage_error(small_run):
    args = ["retrieve", "--checkpoint", str(small_run / "model.ckpt"),
            "--manifest", str(small_run / "manifest.jsonl"), "--sketch", "1,2,oops"]
    with pytest.raises(SystemExit) as info:
        cli.main(args)
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        cli.main(args[:-1] + ["1,2,3"])  # wrong length


def test_export_embeddings(small_run, tmp_path):
    for modality in ("image", "fused"):
        path = tmp_path / f"{modality}.emb"
        assert cli.main(["export-embeddings", "--checkpoint", str(small_run / "model.ckpt"),
                         "--manifest", str(small_run / "manifest.jsonl"),
                         "--modality", modality, "--path", str(path)]) == 0
        values, ids, header = import_embeddings(path)
        assert values.shape == (24, 64) and header["modality"] == modality
        assert ids.tolist() == list(range(24))


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path), "--set", "nope=1", "--set", "ckfso.s=-1"]) == 1
    err = capsys.readouterr().err
    assert "nope: unknown key" in err
    assert not any(tmp_path.iterdir())


def test_train_from_manifest(small_run, tmp_path):
    rc = cli.main(["train", "--out", str(tmp_path), *SMALL,
                   "--set", f"data.manifest={small_run / 'manifest.jsonl'}"])
    assert rc == 0
    # same data and seed as the synthetic run, so the same model
    assert (tmp_path / "model.ckpt").read_bytes() == (small_run / "model.ckpt").read_bytes()


def test_ablate_modules_small(tmp_path):
    assert cli.main(["ablate", "--sweep", "modules", "--out", str(tmp_path), *SMALL]) == 0
    lines = (tmp_path / "ablate_modules.csv").read_text().splitlines()
    assert len(lines) == 7
    assert lines[0].startswith("setting,text,sketch,mcfa,ckfso,cldre,test_R@1")
