import json
from pathlib import Path

import pytest

from sslasr.cli import main


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory):
    """An ultra-small configuration so CLI runs stay quick."""
    cfg = {
        "seed": 99,
        "corpus": {
            "n_words": 5,
            "unseen_fraction": 0.25,
            "n_speakers": 2,
            "train_reps": {"source": 1, "target": 1},
            "test_reps": {"source": 1},
        },
        "pretrain": {"epochs": 1},
        "finetune": {
            "adapter_init_epochs": 4,
            "stages": [
                {"epochs": 2, "scope": "head-only",
                 "optimizer": {"optimizer": "adam", "lr": 1e-2}},
                {"epochs": 2, "scope": "no-feature-encoder",
                 "optimizer": {"optimizer": "adam", "lr": 3e-3}},
            ],
        },
        "am": {"epochs": 2},
        "mdn": {"epochs": 5},
    }
    path = tmp_path_factory.mktemp("cfg") / "toy.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, cli_config):
    """Corpus plus trained artifacts produced through the CLI itself."""
    root = tmp_path_factory.mktemp("cli_work")
    corpus = root / "corpus"
    assert main(["gen-corpus", "--config", cli_config, "--out", str(corpus)]) == 0
    assert main(["pretrain", "--config", cli_config, "--corpus", str(corpus),
                 "--out", str(root / "pre.spm")]) == 0
    assert main(["finetune", "--config", cli_config, "--corpus", str(corpus),
                 "--init", str(root / "pre.spm"), "--out", str(root / "ft.spm"),
                 "--adapter-out", str(root / "adapter.spm")]) == 0
    assert main(["train-am", "--config", cli_config, "--corpus", str(corpus),
                 "--features", "fbk", "--out", str(root / "am_fbk.spm")]) == 0
    return root, corpus, cli_config


class TestUsageErrors:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["gen-corpus"])
        assert err.value.code == 2

    def test_missing_file_returns_1(self, tmp_path, cli_config):
        assert main(["pretrain", "--config", cli_config,
                     "--corpus", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "x.spm")]) == 1

    def test_runtime_error_message_not_traceback(self, tmp_path, cli_config, capsys):
        main(["decode", "--config", cli_config, "--lexicon", str(tmp_path / "no.json")])
        err = capsys.readouterr().err
        assert "error:" in err


class TestDecodeContract:
    def test_decode_emits_json_lines(self, workdir, tmp_path):
        root, corpus, cfg = workdir
        hyp = tmp_path / "hyp.jsonl"
        streams = tmp_path / "streams"
        rc = main(["decode", "--config", cfg, "--corpus", str(corpus),
                   "--am", str(root / "am_fbk.spm"), "--features", "fbk",
                   "--lexicon", str(corpus / "lexicon.json"),
                   "--save-streams", str(streams),
                   "--nbest", "5", "--nbest-out", str(tmp_path / "nb.jsonl"),
                   "--out", str(hyp)])
        assert rc == 0
        lines = [json.loads(line) for line in hyp.read_text().splitlines()]
        assert lines and all({"utt_id", "words", "tokens", "cost"} <= set(d) for d in lines)
        assert sorted(d["utt_id"] for d in lines) == [d["utt_id"] for d in lines]
        assert any(f.suffix == ".post" for f in streams.iterdir())

    def test_decode_single_stream_file(self, workdir, tmp_path):
        root, corpus, cfg = workdir
        streams = tmp_path / "one"
        main(["decode", "--config", cfg, "--corpus", str(corpus),
              "--am", str(root / "am_fbk.spm"), "--features", "fbk",
              "--lexicon", str(corpus / "lexicon.json"),
              "--save-streams", str(streams), "--out", str(tmp_path / "all.jsonl")])
        one = sorted(streams.iterdir())[0]
        out = tmp_path / "hyp1.jsonl"
        rc = main(["decode", "--config", cfg, "--streams", str(one),
                   "--lexicon", str(corpus / "lexicon.json"), "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["utt_id"] == one.stem

    def test_byte_identical_reruns(self, workdir, tmp_path):
        root, corpus, cfg = workdir
        outs = []
        for name in ("a.jsonl", "b.jsonl"):
            out = tmp_path / name
            rc = main(["decode", "--config", cfg, "--corpus", str(corpus),
                       "--am", str(root / "am_fbk.spm"), "--features", "fbk",
                       "--lexicon", str(corpus / "lexicon.json"), "--out", str(out)])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestJointAndRescore:
    def test_joint_decode_ratio_weights(self, workdir, tmp_path):
        root, corpus, cfg = workdir
        s1 = tmp_path / "s1"
        main(["decode", "--config", cfg, "--corpus", str(corpus),
              "--am", str(root / "am_fbk.spm"), "--features", "fbk",
              "--lexicon", str(corpus / "lexicon.json"),
              "--save-streams", str(s1), "--out", str(tmp_path / "h1.jsonl")])
        out = tmp_path / "joint.jsonl"
        nb = tmp_path / "nb.jsonl"
        rc = main(["joint-decode", "--config", cfg,
                   "--lexicon", str(corpus / "lexicon.json"),
                   "--streams", f"{s1},{s1}", "--weights", "3:2",
                   "--nbest", "5", "--nbest-out", str(nb), "--out", str(out)])
        assert rc == 0
        # identical streams under any weights reproduce the single system
        single = {json.loads(l)["utt_id"]: json.loads(l)["words"]
                  for l in (tmp_path / "h1.jsonl").read_text().splitlines()}
        joint = {json.loads(l)["utt_id"]: json.loads(l)["words"]
                 for l in out.read_text().splitlines()}
        assert joint == single

    def test_bad_ratio_is_error(self, workdir, tmp_path):
        root, corpus, cfg = workdir
        rc = main(["joint-decode", "--config", cfg,
                   "--lexicon", str(corpus / "lexicon.json"),
                   "--streams", "x,y", "--weights", "3:zebra",
                   "--out", str(tmp_path / "never.jsonl")])
        assert rc == 1

    def test_rescore_flow(self, workdir, tmp_path):
        root, corpus, cfg = workdir
        s1 = tmp_path / "s1"
        nb = tmp_path / "nb.jsonl"
        main(["decode", "--config", cfg, "--corpus", str(corpus),
              "--am", str(root / "am_fbk.spm"), "--features", "fbk",
              "--lexicon", str(corpus / "lexicon.json"),
              "--save-streams", str(s1), "--nbest", "5", "--nbest-out", str(nb),
              "--out", str(tmp_path / "h1.jsonl")])
        out = tmp_path / "rescored.jsonl"
        rc = main(["rescore", "--config", cfg, "--nbest", str(nb),
                   "--corpus", str(corpus), "--model", str(root / "ft.spm"),
                   "--adapter", str(root / "adapter.spm"),
                   "--weights", "2:9", "--out", str(out)])
        assert rc == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert lines and all(d["words"] for d in lines)


class TestScore:
    def test_score_reports_partitions(self, workdir, tmp_path, capsys):
        root, corpus, cfg = workdir
        hyp = tmp_path / "h.jsonl"
        main(["decode", "--config", cfg, "--corpus", str(corpus),
              "--am", str(root / "am_fbk.spm"), "--features", "fbk",
              "--lexicon", str(corpus / "lexicon.json"), "--out", str(hyp)])
        report = tmp_path / "report.json"
        rc = main(["score", "--hyp", str(hyp), "--corpus", str(corpus),
                   "--out", str(report)])
        assert rc == 0
        table = capsys.readouterr().out
        assert "overall" in table
        data = json.loads(report.read_text())
        assert "by_subset" in data and "overall" in data
