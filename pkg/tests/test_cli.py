import json

import pytest
import yaml

from overflow.cli import main
from overflow.data import load_split

CORPUS = dict(n_symbols=3, frame_dim=2, duration_range=[2, 4], length_range=[1, 3],
              n_train=10, n_val=3, n_test=3, seed=4)
MODEL = dict(n_symbols=3, frame_dim=2, embed_dim=4, encoder_hidden=4, state_dim=4, prenet_dim=4,
             lstm_hidden=6, head_hidden=6, flow_blocks=1, flow_hidden=6)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "corpus.yaml").write_text(yaml.safe_dump(CORPUS))
    assert main(["make-corpus", "--config", str(root / "corpus.yaml"), "--out", str(root / "corpus")]) == 0
    train_cfg = dict(corpus_path=str(root / "corpus"), out_dir=str(root / "run"), batch_size=4,
                     max_updates=20, eval_every=10, checkpoint_every=10, model=MODEL)
    (root / "train.yaml").write_text(yaml.safe_dump(train_cfg))
    assert main(["train", "--config", str(root / "train.yaml")]) == 0
    return root


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_train_writes_artifacts(trained):
    run = trained / "run"
    assert (run / "ckpt-last.npz").exists() and (run / "ckpt-000010.npz").exists()
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 22 and all(isinstance(json.loads(line), dict) for line in lines)


def test_synthesize_temperature_zero_twice_identical(trained, capsys):
    outs = []
    for name in ("a.ovc", "b.ovc"):
        rc = main(["synthesize", "--ckpt", str(trained / "run" / "ckpt-last.npz"), "--text", "0 2 1",
                   "--temperature", "0", "--quantile", "0.5", "--out", str(trained / name)])
        assert rc == 0
        outs.append((trained / name).read_bytes())
    assert outs[0] == outs[1]
    header, (utt,) = load_split(trained / "a.ovc")
    assert header["config"]["temperature"] == 0.0 and utt.symbols.tolist() == [0, 2, 1]
    assert utt.boundaries[-1, 1] == len(utt.frames)


def test_synthesize_of_condition(trained, capsys):
    rc = main(["synthesize", "--ckpt", str(trained / "run" / "ckpt-last.npz"), "--text", "1 1",
               "--temperature", "0.667", "--quantile", "0.5", "--prenet-dropout", "--seed", "3",
               "--out", str(trained / "of.ovc")])
    assert rc == 0 and last_json(capsys)["frames"] >= 4


def test_evaluate(trained, capsys):
    assert main(["evaluate", "--ckpt", str(trained / "run" / "ckpt-last.npz"), "--split", "val"]) == 0
    rec = last_json(capsys)
    assert rec["n_utts"] == 3 and rec["step"] == 20
    assert {"loglik_per_frame", "loglik_per_seq"} <= set(rec)


def test_align(trained, capsys):
    assert main(["align", "--ckpt", str(trained / "run" / "ckpt-last.npz"), "--utterance", "1"]) == 0
    rec = last_json(capsys)
    assert sum(rec["symbol_durations"]) == sum(rec["true_durations"]) == len(rec["states"])
    assert len(rec["boundary_errors"]) == len(rec["true_durations"]) - 1


def test_verify_exit_zero(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") >= 8


def test_usage_errors(tmp_path, capsys):
    assert main(["train", "--bogus"]) != 0
    assert "usage" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) != 0
    err = capsys.readouterr().err
    assert "usage" in err and "missing.yaml" in err
    assert main([]) != 0
    assert main(["synthesize", "--ckpt", "x.npz", "--text", "a b", "--out", "o"]) != 0
