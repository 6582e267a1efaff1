import json

import pytest

from xpronet.cli import main
from xpronet.config import RunConfig
from xpronet.corpus import ConfigError

FAST_FLAGS = ["--layers", "1", "--ffn-dim", "32", "--n-prototypes", "4", "--gamma", "3", "--batch-size", "8",
              "--epochs", "1", "--beam-size", "2"]


class TestRunConfig:
    def test_defaults_valid(self):
        cfg = RunConfig().validate()
        assert cfg.proto_dim == 32 and cfg.alpha == 0.4

    def test_unknown_keys_listed(self):
        with pytest.raises(ConfigError, match="bogus, zeta"):
            RunConfig.from_dict({"zeta": 1, "bogus": 2})

    @pytest.mark.parametrize("raw", [
        {"gamma": 0}, {"alpha": 1.0}, {"dropout": -0.1}, {"normalizer": "linear"},
        {"decode_mode": "sample"}, {"query_dim": 33}, {"epochs": "3"}, {"clamp_positive": 1},
    ])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)

    def test_int_accepted_for_float(self):
        assert RunConfig.from_dict({"theta": 2}).theta == 2.0

    def test_hash_ignores_paths_and_jobs(self):
        base = RunConfig()
        assert base.hash() == base.replace(run_dir="x", data_dir="y", jobs=4).hash()
        assert base.hash() != base.replace(seed=1).hash()

    def test_json_round_trip(self):
        cfg = RunConfig(gamma=7, disable_pi=True)
        assert RunConfig.from_json(cfg.to_json()) == cfg


class TestCliConfig:
    def test_print_config_layers(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gamma": 5, "seed": 3}))
        assert main(["train", "--config", str(path), "--seed", "9", "--no-length-normalize", "--print-config"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert (out["gamma"], out["seed"], out["length_normalize"]) == (5, 9, False)

    def test_bad_config_exit_2(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nope": 1}))
        assert main(["train", "--config", str(path)]) == 2
        assert "nope" in capsys.readouterr().err

    def test_missing_data_dir_exit_2(self):
        assert main(["train"]) == 2

    def test_missing_data_exit_3(self, tmp_path):
        assert main(["train", "--data-dir", str(tmp_path / "absent"), "--run-dir", str(tmp_path / "r")]) == 3


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["gen-corpus", "--out", str(data), "--seed", "2", "--n-samples", "40"]) == 0
    common = ["--data-dir", str(data), "--run-dir", str(run)]
    assert main(["train", *common, *FAST_FLAGS]) == 0
    return root, data, run, common


class TestCliWorkflow:
    def test_gen_corpus_deterministic(self, workflow, tmp_path):
        _, data, _, _ = workflow
        assert main(["gen-corpus", "--out", str(tmp_path), "--seed", "2", "--n-samples", "40"]) == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"):
            assert (tmp_path / name).read_bytes() == (data / name).read_bytes()

    def test_train_artifacts(self, workflow):
        _, _, run, _ = workflow
        for name in ("checkpoint.xpro", "pm.xpm", "loss.csv", "manifest.json"):
            assert (run / name).exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["seeds"] == {"run": 0, "corpus": 2}
        assert set(manifest["ablation"]) == {"disable_pi", "disable_imlcs", "disable_cmpnet"}

    def test_eval_byte_identical(self, workflow):
        _, _, run, _ = workflow
        ckpt = str(run / "checkpoint.xpro")
        outs = []
        for name in ("a.json", "b.json"):
            assert main(["eval", "--checkpoint", ckpt, "--split", "val", "--out", str(run / name)]) == 0
            outs.append((run / name).read_bytes())
        assert outs[0] == outs[1]
        payload = json.loads(outs[0])
        assert set(payload["metrics"]) == {"bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "n_samples"}

    def test_generate(self, workflow):
        _, _, run, _ = workflow
        out = run / "reports.jsonl"
        assert main(["generate", "--checkpoint", str(run / "checkpoint.xpro"), "--split", "test",
                     "--decode-mode", "greedy", "--out", str(out)]) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 8 and {"id", "tokens", "text", "log_prob"} <= set(rows[0])

    def test_inspect(self, workflow):
        _, data, run, _ = workflow
        sid = json.loads((data / "test.jsonl").read_text().splitlines()[0])["id"]
        out = run / "inspect.jsonl"
        assert main(["inspect", "--checkpoint", str(run / "checkpoint.xpro"), "--sample-id", sid, "--out", str(out)]) == 0
        kinds = [json.loads(line)["kind"] for line in out.read_text().splitlines()]
        assert kinds[0] == "report" and "patch" in kinds and "token" in kinds

    def test_inspect_unknown_sample(self, workflow):
        _, _, run, _ = workflow
        assert main(["inspect", "--checkpoint", str(run / "checkpoint.xpro"), "--sample-id", "missing"]) == 3

    def test_export_pm_csv(self, workflow):
        _, _, run, _ = workflow
        out = run / "pm.csv"
        assert main(["export-pm-csv", "--checkpoint", str(run / "checkpoint.xpro"), "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 1 + 14 * 4
        assert main(["export-pm-csv", "--out", str(out)]) == 2

    def test_bad_split_value(self, workflow):
        _, _, run, _ = workflow
        with pytest.raises(SystemExit):
            main(["eval", "--checkpoint", str(run / "checkpoint.xpro"), "--split", "nope"])
