"""CLI contracts: help paths, config validation with full error listing,
command idempotence/determinism, exit codes, and a miniature end-to-end run."""

import pytest

from ecgsynth.cli import build_parser, main
from ecgsynth.config import load_config
from ecgsynth.errors import ConfigError


BASE_CFG = """
[dataset]
classes = SBRAD,STACH,SR
per_class = 8
fs = 100
seconds = 2
leads = 1
seed = 7

[split]
train = 0.6
val = 0.2
test = 0.2
seed = 13

[classifier]
preset = custom
n_conv_blocks = 1
n_kernels = 4
kernel_len = 7
n_neurons = 16
n_dense_layers = 1
lr = 0.002
dropout = 0.0
patience = 3
max_epochs = 6
batch_size = 16
seed = 17

[ddpm]
t_steps = 8
channels = 8
n_layers = 2
steps = 15
batch_size = 4
seed = 23

[vqvae]
stage1_steps = 25
stage2_steps = 25
codebook_size = 8
code_dim = 6
batch_size = 4
seed = 29

[flow]
n_couplings = 2
hidden = 8
steps = 20
batch_size = 4
seed = 31

[sample]
per_class = 6
seed = 37

[matrix]
generators = flow
n_repeats = 1
seed = 41

[transfer]
generator = flow
fractions = 0.5,1.0
n_repeats = 1
seed = 43

[metrics]
pca_components = 5
seed = 47

[output]
dir = {out}
"""


def write_cfg(tmp_path, out=None):
    path = tmp_path / "run.cfg"
    path.write_text(BASE_CFG.format(out=out or tmp_path / "run"))
    return str(path)


class TestParsing:
    def test_help_exits_zero_for_every_command(self, capsys):
        parser = build_parser()
        for command in ["fixture", "ingest", "train-gen", "sample", "train-clf",
                        "eval-matrix", "transfer", "metrics", "report"]:
            with pytest.raises(SystemExit) as exc:
                parser.parse_args([command, "--help"])
            assert exc.value.code == 0
            assert "--config" in capsys.readouterr().out

    def test_unknown_keys_all_listed(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[dataset]\nseed = 1\nbogus = 2\n[nosuch]\nx = 1\n"
                        "[split]\nseed = oops\n")
        with pytest.raises(ConfigError) as exc:
            load_config(path, used_sections=["dataset", "split"])
        msg = str(exc.value)
        assert "unknown key dataset.bogus" in msg
        assert "unknown section [nosuch]" in msg
        assert "bad value for split.seed" in msg

    def test_missing_seed_only_for_used_sections(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("[dataset]\nper_class = 4\n")
        with pytest.raises(ConfigError, match="dataset.seed"):
            load_config(path, used_sections=["dataset"])
        cfg = load_config(path, used_sections=["output"])  # dataset unused
        assert cfg.get("dataset", "per_class") == 4

    def test_overrides_applied_and_validated(self, tmp_path):
        path = write_cfg(tmp_path)
        cfg = load_config(path, overrides=["dataset.per_class=99"],
                          used_sections=["dataset"])
        assert cfg.get("dataset", "per_class") == 99
        with pytest.raises(ConfigError):
            load_config(path, overrides=["dataset.nope=1"])

    def test_missing_config_file(self):
        assert main(["fixture", "--config", "/nonexistent.cfg"]) == 1


class TestCommands:
    def test_fixture_deterministic_bytes(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert main(["fixture", "--config", cfg_path]) == 0
        data_dir = tmp_path / "run" / "data" / "real"
        first = {p.name: p.read_bytes() for p in sorted(data_dir.iterdir())}
        assert main(["fixture", "--config", cfg_path]) == 0
        second = {p.name: p.read_bytes() for p in sorted(data_dir.iterdir())}
        assert first == second
        assert (tmp_path / "run" / "config.resolved.cfg").exists()
        assert (tmp_path / "run" / "manifest-fixture.json").exists()

    def test_eval_matrix_without_generator_exits_1(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        assert main(["fixture", "--config", cfg_path]) == 0
        code = main(["eval-matrix", "--config", cfg_path])
        assert code == 1

    def test_transfer_without_synth_exits_1(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert main(["fixture", "--config", cfg_path]) == 0
        assert main(["transfer", "--config", cfg_path]) == 1

    def test_mini_pipeline_flow(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        out = tmp_path / "run"
        assert main(["fixture", "--config", cfg_path]) == 0
        assert main(["train-gen", "--config", cfg_path, "--model", "flow"]) == 0
        assert (out / "models" / "flow.ckpt").exists()
        assert main(["sample", "--config", cfg_path, "--model", "flow"]) == 0
        synth_dir = out / "data" / "synth-flow"
        assert (synth_dir / "labels.csv").exists()
        gen_manifest = (synth_dir / "generation_manifest.csv").read_text()
        assert gen_manifest.startswith("generator,label,seed,checkpoint_sha256")
        assert main(["train-clf", "--config", cfg_path]) == 0
        assert (out / "classifier_metrics.csv").exists()
        assert main(["eval-matrix", "--config", cfg_path]) == 0
        matrix = (out / "matrix.csv").read_text().strip().splitlines()
        # (flow + all) x 5 settings x 1 repeat
        assert len(matrix) == 1 + 2 * 5
        assert matrix[0].split(",")[:3] == ["setting", "generator", "seed"]
        assert main(["transfer", "--config", cfg_path]) == 0
        transfer = (out / "transfer.csv").read_text().strip().splitlines()
        assert len(transfer) == 1 + 2 * 2  # 2 fractions x (fine_tune, baseline)
        assert main(["metrics", "--config", cfg_path]) == 0
        summary = (out / "metrics_summary.csv").read_text()
        assert summary.startswith("generator,mmd2,bandwidth,two_sample_accuracy")
        assert (out / "embeddings_flow.csv").exists()

    def test_report_renders_tables(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        out = tmp_path / "run"
        assert main(["fixture", "--config", cfg_path]) == 0
        assert main(["train-gen", "--config", cfg_path, "--model", "flow"]) == 0
        assert main(["sample", "--config", cfg_path, "--model", "flow"]) == 0
        assert main(["eval-matrix", "--config", cfg_path]) == 0
        assert main(["report", "--config", cfg_path]) == 0
        shown = capsys.readouterr().out
        for column in ("Accuracy", "Precision", "Recall", "f1-score", "ROC AUC"):
            assert column in shown
        assert (out / "report.txt").exists()

    def test_report_empty_run_exits_1(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        (tmp_path / "run").mkdir(exist_ok=True)
        assert main(["report", "--config", cfg_path]) == 1

    def test_ddpm_and_vqvae_smoke(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert main(["fixture", "--config", cfg_path]) == 0
        for model in ("ddpm", "vqvae"):
            assert main(["train-gen", "--config", cfg_path, "--model", model]) == 0
            assert main(["sample", "--config", cfg_path, "--model", model]) == 0
            labels = (tmp_path / "run" / "data" / f"synth-{model}" / "labels.csv")
            assert len(labels.read_text().strip().splitlines()) == 1 + 3 * 6

    def test_wfdb_ingest_roundtrip(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert main(["fixture", "--config", cfg_path]) == 0
        src = str(tmp_path / "run" / "data" / "real")
        out2 = tmp_path / "run2"
        cfg2 = tmp_path / "ingest.cfg"
        cfg2.write_text(BASE_CFG.format(out=out2) +
                        f"\n[dataset]\nwfdb_dir = {src}\n")
        # configparser forbids duplicate sections: build a clean override file
        cfg2.write_text(BASE_CFG.replace("[dataset]",
                                         f"[dataset]\nwfdb_dir = {src}",
                                         1).format(out=out2))
        assert main(["ingest", "--config", str(cfg2)]) == 0
        assert (out2 / "data" / "real" / "labels.csv").exists()


class TestEnvOverride:
    def test_output_root_env_var(self, tmp_path, monkeypatch):
        cfg_path = write_cfg(tmp_path)
        override = tmp_path / "elsewhere"
        monkeypatch.setenv("ECGSYNTH_OUT", str(override))
        assert main(["fixture", "--config", cfg_path]) == 0
        assert (override / "data" / "real" / "labels.csv").exists()
        assert not (tmp_path / "run" / "data").exists()
