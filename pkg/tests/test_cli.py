import json

import pytest

from mctcap.cli import main
from mctcap.config import RunConfig


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["gen-toy", "--images", "8", "--seed", "3", "--out-dir", str(out), "--force"]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(toy_dir):
    ckpt = toy_dir / "model.mctc"
    assert main(["train", "--config", str(toy_dir / "config.json"), "--epochs", "3", "--out", str(ckpt)]) == 0
    return ckpt


def test_gen_toy_files(toy_dir):
    for name in ("features.jsonl", "features.bin", "captions.jsonl", "splits.json", "config.json"):
        assert (toy_dir / name).exists()
    cfg = RunConfig.load(toy_dir / "config.json")
    assert cfg.paths.features.endswith("features.jsonl")


def test_gen_toy_rejects_single_image(tmp_path):
    assert main(["gen-toy", "--images", "1", "--out-dir", str(tmp_path / "x")]) == 1


def test_gen_toy_refuses_non_empty_dir(toy_dir):
    assert main(["gen-toy", "--out-dir", str(toy_dir)]) == 1


def test_train_writes_log(checkpoint):
    lines = checkpoint.with_suffix(".mctc.log").read_text().splitlines()
    assert len(lines) == 3
    epoch, loss, lr = lines[0].split("\t")
    assert epoch == "0" and float(loss) > 0 and float(lr) > 0


def test_caption_prints_words(checkpoint, toy_dir, capsys):
    capsys.readouterr()
    code = main(["caption", "--checkpoint", str(checkpoint), "--features", str(toy_dir / "features.bin"),
                 "--image-id", "toy0000", "--beam", "2"])
    assert code == 0
    assert capsys.readouterr().out.endswith("\n")


def test_caption_unknown_image(checkpoint, toy_dir):
    assert main(["caption", "--checkpoint", str(checkpoint), "--features", str(toy_dir / "features.bin"),
                 "--image-id", "nope"]) == 2


def test_evaluate_tsv_and_json(checkpoint, toy_dir, capsys):
    cfg = str(toy_dir / "config.json")
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--config", cfg, "--split", "train"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "Model\tA1\tA2\tA3\tA4\tR\tC"
    assert lines[1].startswith("MCT\t") and len(lines[1].split("\t")) == 7
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--config", cfg, "--split", "train",
                 "--format", "json", "--name", "run"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["model"] == "run" and set(doc) == {"model", "A1", "A2", "A3", "A4", "R", "C"}


def test_evaluate_empty_split_is_data_error(checkpoint, toy_dir):
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--config", str(toy_dir / "config.json"),
                 "--split", "test"]) == 2


def test_corrupt_checkpoint_exit_code(tmp_path, toy_dir):
    bad = tmp_path / "bad.mctc"
    bad.write_bytes(b"XXXX" + bytes(20))
    assert main(["caption", "--checkpoint", str(bad), "--features", str(toy_dir / "features.bin"),
                 "--image-id", "toy0000"]) == 2


def test_bad_config_and_usage_exit_codes(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"encoder": {"d_model": 30, "n_heads": 4, "d_head": 8}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "many"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_missing_data_exit_code(tmp_path):
    assert main(["train", "--features", str(tmp_path / "none.jsonl"), "--captions", str(tmp_path / "c"),
                 "--out", str(tmp_path / "m")]) == 2


def test_gradcheck_passes_and_detects_injected_bug(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert {r[0] for r in rows} >= {"matmul", "softmax", "layer_norm", "relu", "attention_head",
                                     "encoder_block", "decoder_block", "lstm_cell", "elmo_mixer",
                                     "cross_entropy"}
    assert all(r[2] == "PASS" for r in rows)
    assert main(["gradcheck", "--inject-bug"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_ablate_depth_table(toy_dir, tmp_path, capsys):
    out = tmp_path / "ablation.tsv"
    capsys.readouterr()
    assert main(["ablate-depth", "--config", str(toy_dir / "config.json"), "--depths", "1,2",
                 "--epochs", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("Profundity\tA1")
    assert [line.split("\t")[0] for line in lines[1:]] == ["1", "2"]
    assert main(["ablate-depth", "--depths", "0"]) == 1
