"""End-to-end runs of the command-line front end via main(argv)."""

import json

from model_import.cli import main

from conftest import write_checkpoint


def run(argv, capsys):
    rc = main(argv)
    out, err = capsys.readouterr()
    return rc, out, err


def test_convert_writes_manifest_and_summary(primary_ckpt, tmp_path, capsys):
    out_dir = tmp_path / "out"
    rc, out, err = run(["convert", "--src", str(primary_ckpt), "--out", str(out_dir)], capsys)
    assert rc == 0, err
    summary = json.loads(out)
    assert (out_dir / "manifest.json").exists()
    assert (out_dir / "weights.bin").exists()
    assert summary["tensors"] == 30
    assert len(summary["source_digest"]) == 64
    assert summary["vocab"] == str(out_dir / "vocab.txt")
    assert summary["tokenizer_id"].startswith("hf-")


def test_convert_no_vocab(primary_ckpt, tmp_path, capsys):
    out_dir = tmp_path / "out"
    rc, out, _ = run(
        ["convert", "--src", str(primary_ckpt), "--out", str(out_dir), "--no-vocab"], capsys
    )
    assert rc == 0
    assert json.loads(out)["vocab"] is None
    assert not (out_dir / "vocab.txt").exists()


def test_fixtures_to_file_and_stdout(primary_ckpt, tmp_path, capsys):
    prompts_file = tmp_path / "prompts.txt"
    prompts_file.write_text("Hello, world!\nGood night, moon.\n")
    out_file = tmp_path / "fixtures.json"
    rc, out, err = run(
        ["fixtures", "--src", str(primary_ckpt), "--prompts", str(prompts_file),
         "--out", str(out_file), "--greedy", "2"],
        capsys,
    )
    assert rc == 0, err
    assert out == ""
    payload = json.loads(out_file.read_text())
    assert len(payload["prompts"]) == 2
    assert payload["greedy_len"] == 2

    rc, out, _ = run(
        ["fixtures", "--src", str(primary_ckpt), "--prompts", str(prompts_file),
         "--greedy", "0"],
        capsys,
    )
    assert rc == 0
    assert json.loads(out)["prompts"][0]["greedy_ids"] == []


def test_convert_error_exits_nonzero(tmp_path, capsys):
    rc, out, err = run(
        ["convert", "--src", str(tmp_path / "nowhere"), "--out", str(tmp_path / "out")], capsys
    )
    assert rc == 1
    assert err.startswith("error:")


def test_gqa_checkpoint_reports_component(tmp_path, capsys):
    src = write_checkpoint(
        tmp_path / "gqa",
        n_layers=2, n_heads=2, head_dim=8, d_model=16, d_ff=32, seed=1,
        config_overrides={"num_key_value_heads": 1},
    )
    rc, _, err = run(["convert", "--src", str(src), "--out", str(tmp_path / "out")], capsys)
    assert rc == 1
    assert "num_key_value_heads" in err


def test_missing_prompts_file_exits_nonzero(primary_ckpt, tmp_path, capsys):
    rc, _, err = run(
        ["fixtures", "--src", str(primary_ckpt), "--prompts", str(tmp_path / "none.txt")], capsys
    )
    assert rc == 1
    assert err.startswith("error:")
