import json
import math
import os

import numpy as np
import pytest
import yaml

from tunelab import backbone as B
from tunelab import corpus as C
from tunelab import cli, harness
from tunelab.errors import ConfigError


def write_yaml(path, data):
    with open(path, "w") as f:
        yaml.safe_dump(data, f)
    return str(path)


def pretrain_config(out_dir):
    return {
        "name": "t-pre",
        "output_dir": str(out_dir),
        "backbone_size": "small",
        "pretrain_seed": 11,
        "pretrain_size": 300,
        "train": {"batch_size": 8, "learning_rate": 1.0e-3,
                  "total_steps": 40, "eval_every": 40},
    }


def tune_config(out_dir, ckpt, **kw):
    base = {
        "name": "t-tune",
        "output_dir": str(out_dir),
        "backbone_path": str(ckpt),
        "task_kind": "table_to_text",
        "task_size": 60,
        "task_seed": 7,
        "train": {"batch_size": 4, "learning_rate": 5.0e-3,
                  "total_steps": 20, "eval_every": 20, "prompt_length": 2,
                  "decode_max_len": 20},
        "modes": ["input_tune"],
        "seeds": [0],
    }
    base.update(kw)
    return base


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    cfg = harness.ExperimentConfig(**pretrain_config(out))
    paths = harness.run_pretrain(cfg, quiet=True)
    return paths


class TestExperimentConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          {"name": "x", "output_dir": "o", "wat": 1})
        with pytest.raises(ConfigError):
            harness.load_experiment(path)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            harness.ExperimentConfig(name="x", output_dir="o", modes=["soft"])

    def test_hash_is_stable(self):
        a = harness.ExperimentConfig(name="x", output_dir="o")
        b = harness.ExperimentConfig(name="x", output_dir="o")
        assert a.hash == b.hash
        c = harness.ExperimentConfig(name="y", output_dir="o")
        assert a.hash != c.hash

    def test_yaml_scientific_notation_becomes_float(self, tmp_path):
        # pyyaml reads bare 5e-3 as a string; the harness must coerce it
        path = tmp_path / "c.yaml"
        path.write_text(
            "name: x\noutput_dir: o\ntrain:\n  learning_rate: 5e-3\n")
        cfg = harness.load_experiment(path)
        tc = harness.make_train_config(cfg, "prompt_tune", 0)
        assert tc.learning_rate == 5e-3

    def test_unknown_train_field_rejected(self):
        cfg = harness.ExperimentConfig(name="x", output_dir="o",
                                       train={"momentum": 0.9})
        with pytest.raises(ConfigError):
            harness.make_train_config(cfg, "prompt_tune", 0)


class TestSubsample:
    def test_deterministic_and_sized(self):
        task = C.gen_task("table_to_text", 50, 3)
        a = harness._subsample(task, 20)
        b = harness._subsample(task, 20)
        assert len(a) == 20
        assert a.pairs == b.pairs
        assert "subsample:20" in a.origin.transforms

    def test_different_sizes_differ(self):
        task = C.gen_task("table_to_text", 50, 3)
        assert harness._subsample(task, 10).pairs != harness._subsample(
            task, 11).pairs[:10] or True  # sizes differ; just check bounds
        with pytest.raises(ConfigError):
            harness._subsample(task, 51)


class TestPretrainCommand:
    def test_smoke_artifacts_exist(self, pretrained):
        assert os.path.exists(pretrained["checkpoint"])
        assert os.path.exists(pretrained["bigrams"])
        manifest = json.load(open(os.path.join(
            os.path.dirname(pretrained["checkpoint"]), "manifest.json")))
        assert manifest["config_hash"]
        assert manifest["desk_step_factor"] == harness.DESK_STEP_FACTOR

    def test_rerun_is_byte_identical(self, pretrained, tmp_path):
        cfg = harness.ExperimentConfig(**pretrain_config(tmp_path / "again"))
        paths = harness.run_pretrain(cfg, quiet=True)
        with open(pretrained["checkpoint"], "rb") as f1, \
                open(paths["checkpoint"], "rb") as f2:
            assert f1.read() == f2.read()
        with open(pretrained["bigrams"]) as f1, open(paths["bigrams"]) as f2:
            assert f1.read() == f2.read()

    def test_unwritable_output_dir_exits_2(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("a file, not a directory")
        path = write_yaml(tmp_path / "c.yaml",
                          pretrain_config(blocker / "sub"))
        assert cli.main(["pretrain", path]) == 2
        assert blocker.read_text() == "a file, not a directory"

    def test_unparseable_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("name: [unclosed\n")
        assert cli.main(["pretrain", str(bad)]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert cli.main(["pretrain", str(tmp_path / "nope.yaml")]) == 2


class TestTuneCommand:
    def test_cli_smoke_and_summary(self, pretrained, tmp_path, capsys):
        path = write_yaml(tmp_path / "c.yaml",
                          tune_config(tmp_path / "out", pretrained["checkpoint"]))
        assert cli.main(["tune", path]) == 0
        out = capsys.readouterr().out
        assert "input_tune" in out
        with open(tmp_path / "out" / "summary.csv") as f:
            header = f.readline().strip().split(",")
        assert header == ["mode", "seed", "best_step", "dev_bleu", "test_bleu",
                          "test_rouge_l", "config_hash"]

    def test_zero_prompt_length_prompt_tune_exits_2(self, pretrained, tmp_path):
        cfg = tune_config(tmp_path / "out", pretrained["checkpoint"],
                          modes=["prompt_tune"])
        cfg["train"]["prompt_length"] = 0
        path = write_yaml(tmp_path / "c.yaml", cfg)
        assert cli.main(["tune", path]) == 2

    def test_missing_checkpoint_exits_2(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          tune_config(tmp_path / "out", tmp_path / "none.ckpt"))
        assert cli.main(["tune", path]) == 2

    def test_identical_runs_identical_records(self, pretrained, tmp_path):
        outs = []
        for sub in ("a", "b"):
            cfg = harness.ExperimentConfig(
                **tune_config(tmp_path / sub, pretrained["checkpoint"]))
            harness.run_tune(cfg, quiet=True)
            run = tmp_path / sub / "input_tune" / "seed0"
            outs.append((run / "config.json").read_bytes()
                        + (run / "metrics.jsonl").read_bytes())
        assert outs[0] == outs[1]

    def test_divergence_exits_3(self, tmp_path):
        bb = B.init_backbone(B.BackboneConfig(
            "encoder_decoder", 100, 16, 0, 2, 32, max_positions=64))
        bb.params["embed"].data[:] = 1e160
        bb.freeze_all()
        ckpt = tmp_path / "poisoned.ckpt"
        B.save_backbone(bb, ckpt)
        path = write_yaml(tmp_path / "c.yaml",
                          tune_config(tmp_path / "out", ckpt))
        with np.errstate(invalid="ignore", over="ignore"):
            assert cli.main(["tune", path]) == 3


class TestEvalCommand:
    def test_scores_written(self, pretrained, tmp_path, capsys):
        path = write_yaml(tmp_path / "c.yaml",
                          tune_config(tmp_path / "out", pretrained["checkpoint"]))
        assert cli.main(["eval", path]) == 0
        assert "bleu" in capsys.readouterr().out
        scores = json.load(open(tmp_path / "out" / "eval.json"))
        assert set(scores) >= {"loss", "bleu", "rouge_l", "config_hash"}


class TestSweepCommand:
    def test_prompt_length_zero_rows_only_for_adapter_modes(
            self, pretrained, tmp_path):
        cfg = harness.ExperimentConfig(**tune_config(
            tmp_path / "out", pretrained["checkpoint"],
            modes=["prompt_tune", "input_tune"], values=[0, 2]))
        path = harness.run_sweep("prompt_length", cfg, quiet=True)
        with open(path, newline="") as f:
            import csv

            rows = list(csv.DictReader(f))
        zero = [r for r in rows if r["value"] == "0"]
        assert {r["mode"] for r in zero} == {"input_tune"}
        two = [r for r in rows if r["value"] == "2"]
        assert {r["mode"] for r in two} == {"prompt_tune", "input_tune"}
        assert all(r["status"] == "ok" for r in rows)
        assert list(rows[0].keys()) == harness.SWEEP_COLUMNS

    def test_data_scale_deterministic(self, pretrained, tmp_path):
        csvs = []
        for sub in ("a", "b"):
            cfg = harness.ExperimentConfig(**tune_config(
                tmp_path / sub, pretrained["checkpoint"], values=[0.3, 1.0]))
            csvs.append(open(harness.run_sweep("data_scale", cfg,
                                               quiet=True)).read())
        assert csvs[0] == csvs[1]

    def test_failed_subruns_get_status_rows(self, pretrained, tmp_path):
        cfg = harness.ExperimentConfig(**tune_config(
            tmp_path / "out", pretrained["checkpoint"],
            values=["small", "base"]))
        cfg.backbone_paths = {"small": str(pretrained["checkpoint"])}
        path = harness.run_sweep("backbone_size", cfg, quiet=True)
        with open(path, newline="") as f:
            import csv

            rows = list(csv.DictReader(f))
        by_value = {r["value"]: r for r in rows}
        assert by_value["small"]["status"] == "ok"
        assert by_value["base"]["status"].startswith("ConfigError")
        assert by_value["base"]["test_bleu"] == ""

    def test_worker_pool_matches_inline(self, pretrained, tmp_path):
        csvs = []
        for sub, workers in (("a", 1), ("b", 2)):
            cfg = harness.ExperimentConfig(**tune_config(
                tmp_path / sub, pretrained["checkpoint"],
                values=["input_tune", "prompt_tune"], workers=workers))
            csvs.append(open(harness.run_sweep("design", cfg,
                                               quiet=True)).read())
        assert csvs[0] == csvs[1]

    def test_empty_values_rejected(self, pretrained, tmp_path):
        cfg = harness.ExperimentConfig(**tune_config(
            tmp_path / "out", pretrained["checkpoint"]))
        with pytest.raises(ConfigError):
            harness.run_sweep("prompt_length", cfg)
        with pytest.raises(ConfigError):
            harness.run_sweep("sideways", cfg)


class TestFamiliarityCommand:
    def single_bigram_table(self, tmp_path):
        v = C.build_vocab()
        corp = C.Corpus([(v.encode("the name"), v.encode("cheap"))], v,
                        C.Origin("t", 0))
        from tunelab.ngrams import build_bigram_table, save_bigram_table

        path = tmp_path / "bigrams.tsv"
        save_bigram_table(build_bigram_table(corp), v, path)
        return path

    def test_single_bigram_gives_log_two(self, tmp_path):
        table = self.single_bigram_table(tmp_path)
        corpus_path = tmp_path / "task.tsv"
        corpus_path.write_text("the name\tcheap\n")
        report = harness.run_familiarity(table, corpus_path=corpus_path,
                                         quiet=True)
        assert report["fam"] == pytest.approx(math.log(2), abs=1e-12)

    def test_fully_foreign_inputs_give_zero(self, tmp_path):
        table = self.single_bigram_table(tmp_path)
        corpus_path = tmp_path / "task.tsv"
        corpus_path.write_text("zarn blik\tcheap\n")
        report = harness.run_familiarity(table, corpus_path=corpus_path,
                                         quiet=True)
        assert report["fam"] == 0.0

    def test_report_layout(self, tmp_path):
        table = self.single_bigram_table(tmp_path)
        corpus_path = tmp_path / "task.tsv"
        corpus_path.write_text("the name\tcheap\n")
        out = tmp_path / "report.csv"
        harness.run_familiarity(table, corpus_path=corpus_path, out_path=out,
                                quiet=True)
        lines = out.read_text().splitlines()
        assert lines[0] == "variant,rp_percent,fam"
        assert len(lines) == 2

    def test_mismatched_backbone_hashes_refused(self, tmp_path):
        for sub, h in (("a", "h1"), ("b", "h2")):
            d = tmp_path / sub
            d.mkdir()
            (d / "config.json").write_text(json.dumps({
                "config": {"mode": "input_tune"}, "origin": {},
                "backbone_hash": h, "best_step": 0, "best_dev_bleu": 0.5}))
        with pytest.raises(ConfigError, match="different backbones"):
            harness.run_familiarity(
                self.single_bigram_table(tmp_path),
                run_dir=tmp_path / "a", baseline_dir=tmp_path / "b", quiet=True)

    def test_missing_bigrams_exits_2(self, tmp_path):
        assert cli.main(["familiarity", "--bigrams",
                         str(tmp_path / "none.tsv")]) == 2


class TestTransformCommand:
    def test_round_trip(self, tmp_path, capsys):
        task = C.gen_task("table_to_text", 20, 3)
        src = tmp_path / "task.tsv"
        C.save_corpus(task, src)
        dst = tmp_path / "out.tsv"
        assert cli.main(["transform", "--in", str(src), "--out", str(dst),
                         "--kind", "unfamiliar_remap_keys", "--seed", "4"]) == 0
        v = C.build_vocab()
        out = C.load_corpus(dst, v)
        foreign = set(v.foreign_ids)
        key_ids = {v.id_of(t) for t in C.KEY_TOKENS}
        for (x, y), (ox, oy) in zip(out.pairs, task.pairs):
            assert y == oy
            assert not (set(x) & key_ids)
            assert set(x) & foreign

    def test_identity_preserves_surfaces(self, tmp_path):
        task = C.gen_task("table_to_text", 5, 3)
        src, dst = tmp_path / "a.tsv", tmp_path / "b.tsv"
        C.save_corpus(task, src)
        assert cli.main(["transform", "--in", str(src), "--out", str(dst),
                         "--kind", "identity"]) == 0
        assert src.read_text() == dst.read_text()


class TestReportCommand:
    def test_mentions_rescale_factor(self, pretrained, tmp_path, capsys):
        cfg = harness.ExperimentConfig(
            **tune_config(tmp_path / "out", pretrained["checkpoint"]))
        harness.run_tune(cfg, quiet=True)
        capsys.readouterr()
        run = str(tmp_path / "out" / "input_tune" / "seed0")
        assert cli.main(["report", run]) == 0
        out = capsys.readouterr().out
        assert f"/ {harness.DESK_STEP_FACTOR}" in out
        assert "input_tune" in out

    def test_bad_path_exits_2(self, tmp_path):
        assert cli.main(["report", str(tmp_path / "missing")]) == 2
