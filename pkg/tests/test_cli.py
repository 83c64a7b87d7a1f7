import json
from pathlib import Path

import pytest

from finsent.cli import main
from finsent.model import load_checkpoint

from conftest import TOY_TEMPLATE, toy_corpus

GOLDEN = Path(__file__).parent / "golden"

CONFIG = """\
tokenizer.vocab_size = 300
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.d_ff = 32
model.max_seq_len = 64
train.epochs = 1
train.lr_start = 1e-3
train.lr_end = 1e-4
train.eval_every = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.txt"
    data.write_text(
        "\n".join(f"{e.sentence}@{e.label}" for e in toy_corpus(48)) + "\n",
        encoding="utf-8",
    )
    template = root / "template.txt"
    TOY_TEMPLATE.to_file(template)
    config = root / "config.txt"
    config.write_text(CONFIG, encoding="utf-8")
    prep = root / "prep"
    rc = main(["prepare", "--data", str(data), "--out", str(prep),
               "--template", str(template), "--config", str(config)])
    assert rc == 0
    return {"root": root, "data": data, "template": template,
            "config": config, "prep": prep}


def run_train(workspace, mode, out):
    return main(["train", "--mode", mode, "--prep", str(workspace["prep"]),
                 "--out", str(out), "--config", str(workspace["config"])])


@pytest.fixture(scope="module")
def sft_run(workspace):
    out = workspace["root"] / "sft"
    assert run_train(workspace, "sft", out) == 0
    return out


@pytest.fixture(scope="module")
def cls_run(workspace):
    out = workspace["root"] / "cls"
    assert run_train(workspace, "classhead", out) == 0
    return out


def test_prepare_artifacts(workspace):
    prep = workspace["prep"]
    for name in ("splits.json", "vocab.txt", "template.txt", "runconfig.txt",
                 "train.pack", "val.pack", "test.pack"):
        assert (prep / name).exists(), name
    manifest = json.loads((prep / "splits.json").read_text())
    assert manifest["n"] == 48
    assert len(manifest["test"]) == round(0.2 * 48)


def test_prepare_reproducible(workspace):
    prep2 = workspace["root"] / "prep2"
    rc = main(["prepare", "--data", str(workspace["data"]), "--out", str(prep2),
               "--template", str(workspace["template"]),
               "--config", str(workspace["config"])])
    assert rc == 0
    for name in ("splits.json", "vocab.txt", "train.pack"):
        assert (prep2 / name).read_bytes() == \
            (workspace["prep"] / name).read_bytes()


def test_prepare_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    rc = main(["prepare", "--data", str(missing), "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "nope.txt" in capsys.readouterr().err


def test_train_artifacts_and_heads(sft_run, cls_run):
    sft = load_checkpoint(sft_run / "checkpoint.fsnt")
    cls = load_checkpoint(cls_run / "checkpoint.fsnt")
    assert "lm_head.b" in sft.params and "cls_head.w" not in sft.params
    assert "cls_head.w" in cls.params and "lm_head.b" not in cls.params
    assert (sft_run / "trainlog.jsonl").exists()
    assert (sft_run / "runconfig.txt").exists()


def test_train_invalid_lr_config(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text(CONFIG.replace("train.lr_end = 1e-4", "train.lr_end = 1e-2"))
    rc = main(["train", "--mode", "sft", "--prep", str(workspace["prep"]),
               "--out", str(tmp_path / "o"), "--config", str(bad)])
    assert rc == 2


def test_unknown_config_key_rejected(workspace, tmp_path):
    bad = tmp_path / "bad2.txt"
    bad.write_text("model.flux_capacitor = 1\n")
    rc = main(["train", "--mode", "sft", "--prep", str(workspace["prep"]),
               "--out", str(tmp_path / "o"), "--config", str(bad)])
    assert rc == 2


def test_locked_output_refused(workspace, tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").touch()
    rc = main(["prepare", "--data", str(workspace["data"]), "--out", str(out),
               "--template", str(workspace["template"])])
    assert rc == 2
    assert "locked" in capsys.readouterr().err


def test_eval_writes_reports(workspace, sft_run, tmp_path):
    out = tmp_path / "eval"
    rc = main(["eval", "--mode", "sft", "--ckpt", str(sft_run / "checkpoint.fsnt"),
               "--prep", str(workspace["prep"]), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mode"] == "sft"
    assert report["n"] == round(0.2 * 48)
    assert "Accuracy" in (out / "report.txt").read_text()


def test_eval_repeatable_bytes(workspace, cls_run, tmp_path):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        rc = main(["eval", "--mode", "classhead",
                   "--ckpt", str(cls_run / "checkpoint.fsnt"),
                   "--prep", str(workspace["prep"]), "--out", str(out)])
        assert rc == 0
        outs.append((out / "report.json").read_bytes())
    assert outs[0] == outs[1]


def test_eval_gate_failure(workspace, sft_run, tmp_path):
    rc = main(["eval", "--mode", "sft", "--ckpt", str(sft_run / "checkpoint.fsnt"),
               "--prep", str(workspace["prep"]), "--out", str(tmp_path / "g"),
               "--min-accuracy", "1.01"])
    assert rc == 5


def test_eval_head_mode_mismatch(workspace, sft_run, tmp_path):
    rc = main(["eval", "--mode", "classhead",
               "--ckpt", str(sft_run / "checkpoint.fsnt"),
               "--prep", str(workspace["prep"]), "--out", str(tmp_path / "m")])
    assert rc == 2


def test_eval_fewshot_mode_runs(workspace, sft_run, tmp_path):
    # few-shot evaluation of an (untrained or trained) LM checkpoint
    out = tmp_path / "few"
    rc = main(["eval", "--mode", "fewshot",
               "--ckpt", str(sft_run / "checkpoint.fsnt"),
               "--prep", str(workspace["prep"]), "--out", str(out),
               "--baselines"])
    assert rc == 0
    assert "FinBERT" in (out / "report.txt").read_text()


def test_prompt_matches_golden(capsys):
    assert main(["prompt", "--title", "Testco shares rose."]) == 0
    out = capsys.readouterr().out
    assert out.encode() == (GOLDEN / "sft_prompt.txt").read_bytes()
    assert main(["prompt", "--title", "Testco shares rose.", "--fewshot"]) == 0
    out = capsys.readouterr().out
    assert out.encode() == (GOLDEN / "fewshot_prompt.txt").read_bytes()
    assert "Answer:C" in out  # Standard Chartered exemplar


def test_prompt_fewshot_block_count(capsys):
    main(["prompt", "--title", "t"])
    zero_shot = capsys.readouterr().out
    main(["prompt", "--title", "t", "--fewshot"])
    few_shot = capsys.readouterr().out
    assert zero_shot.count("News Title:") == 1
    assert few_shot.count("News Title:") == 4
