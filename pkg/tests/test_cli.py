import re
import subprocess
import sys

import pytest

from bridgelab import data, layers
from bridgelab.cli import main
from bridgelab.config import ConfigError, RunConfig, parse_text

GEN = ["--classes", "10", "--per-class", "8", "--image-size", "9", "--attributes", "5", "--embed-dim", "4"]
TINY_RUN = [
    "--widths", "3,4", "--aux-widths", "3,4", "--convs-per-block", "1", "--aux-convs-per-block", "1",
    "--bridge-hidden", "6", "--bridge-depth", "1", "--way", "2", "--shot", "2", "--query", "2",
    "--steps", "2", "--val-every", "0", "--eval-episodes", "5",
]


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.smpx"
    assert main(["gen-data", *GEN, "--seed", "0", "--out", str(path)]) == 0
    return path


class TestConfig:
    def test_parse_text(self):
        assert parse_text("# comment\nlr = 0.01  # trailing\n\nvariant=simpaux\n") == {"lr": "0.01", "variant": "simpaux"}
        with pytest.raises(ConfigError):
            parse_text("no equals sign")

    def test_typed_values_and_unknown_keys(self):
        cfg = RunConfig.from_mapping({"lr": "0.01", "stop-gradient": "yes", "steps": "7"})
        assert (cfg.lr, cfg.stop_gradient, cfg.steps) == (0.01, True, 7)
        with pytest.raises(ConfigError) as info:
            RunConfig.from_mapping({"bogus": 1, "steps": "x"})
        assert len(info.value.problems) == 2

    def test_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(variant="nope").validate(need_dataset=False)
        with pytest.raises(ConfigError):
            RunConfig(widths="3,a").validate(need_dataset=False)
        RunConfig().validate(need_dataset=False)

    def test_seed_resolution(self, monkeypatch):
        monkeypatch.setenv("BRIDGELAB_SEED", "17")
        assert RunConfig().resolved().seed == 17
        assert RunConfig(seed=3).resolved().seed == 3
        monkeypatch.setenv("BRIDGELAB_SEED", "x")
        with pytest.raises(ConfigError):
            RunConfig().resolved()

    def test_text_round_trip(self):
        cfg = RunConfig(variant="oracle", include_oracle=True, lr=0.5)
        assert RunConfig.from_mapping(parse_text(cfg.to_text())) == cfg

    def test_ablation_always_included(self):
        assert RunConfig(variants="baseline", include_oracle=True).variant_list() == ["baseline", "ablation", "oracle"]


class TestGenData:
    def test_summary_and_determinism(self, tmp_path, capsys):
        assert main(["gen-data", *GEN, "--ambiguity", "0.6", "--out", str(tmp_path / "a.smpx")]) == 0
        out = capsys.readouterr().out
        assert "splits: train=6, val=2, test=2" in out
        assert "ambiguity rho: 0.6 (3 of 5 attributes invisible)" in out
        main(["gen-data", *GEN, "--ambiguity", "0.6", "--out", str(tmp_path / "b.smpx")])
        assert (tmp_path / "a.smpx").read_bytes() == (tmp_path / "b.smpx").read_bytes()

    def test_config_file_and_flag_override(self, tmp_path):
        conf = tmp_path / "gen.conf"
        conf.write_text("classes = 12\nambiguity = 0.2\nper_class = 4\nimage_size = 9\nattributes = 5\n")
        assert main(["gen-data", "--config", str(conf), "--ambiguity", "0.4", "--out", str(tmp_path / "c.smpx")]) == 0
        ds = data.load(tmp_path / "c.smpx")
        assert len(ds) == 48 and ds.metadata["ambiguity"] == 0.4

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BRIDGELAB_SEED", "5")
        main(["gen-data", *GEN, "--out", str(tmp_path / "e.smpx")])
        main(["gen-data", *GEN, "--seed", "5", "--out", str(tmp_path / "f.smpx")])
        assert (tmp_path / "e.smpx").read_bytes() == (tmp_path / "f.smpx").read_bytes()

    @pytest.mark.parametrize("argv", [["--ambiguity", "1.5"], ["--classes", "2"], []])
    def test_invalid(self, tmp_path, argv):
        out = [] if not argv else ["--out", str(tmp_path / "x.smpx")]
        assert main(["gen-data", *GEN, *argv, *out]) == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--bogus", "1"])
        assert info.value.code == 2


class TestTrainEval:
    def test_train_then_eval(self, dataset_path, tmp_path, capsys):
        run = tmp_path / "run"
        common = ["--dataset", str(dataset_path), "--out-dir", str(run), *TINY_RUN]
        assert main(["train", "--variant", "simpaux", "--seed", "1", *common]) == 0
        assert (run / "checkpoint.smpx").exists()
        assert len((run / "train_log.tsv").read_text().splitlines()) == 2
        assert "variant = simpaux" in (run / "resolved_config.txt").read_text()
        capsys.readouterr()

        assert main(["eval", *common]) == 0
        report = (run / "eval_report.txt").read_text()
        assert "episodes: 5" in report and "variant: simpaux" in report
        assert re.search(r"accuracy_pct: \d+\.\d ± \d+\.\d", report)
        episodes = (run / "eval_episodes.csv").read_text().splitlines()
        assert episodes[0] == "episode,accuracy" and len(episodes) == 6

        assert main(["eval", *common, "--workers", "2"]) == 0
        assert (run / "eval_report.txt").read_text() == report

    def test_train_byte_identical(self, dataset_path, tmp_path):
        for name in ("a", "b"):
            main(["train", "--dataset", str(dataset_path), "--out-dir", str(tmp_path / name), "--seed", "2", *TINY_RUN])
        for f in ("checkpoint.smpx", "train_log.tsv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_too_many_classes_is_precondition_error(self, dataset_path, tmp_path):
        argv = ["train", "--dataset", str(dataset_path), "--out-dir", str(tmp_path), *TINY_RUN, "--way", "7"]
        assert main(argv) == 3

    def test_missing_dataset_and_checkpoint(self, dataset_path, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "none.smpx"), *TINY_RUN]) == 2
        assert main(["eval", "--dataset", str(dataset_path), "--out-dir", str(tmp_path), *TINY_RUN]) == 3

    def test_corrupt_dataset(self, dataset_path, tmp_path):
        bad = tmp_path / "bad.smpx"
        bad.write_bytes(b"SMPX" + dataset_path.read_bytes()[4:40])
        assert main(["train", "--dataset", str(bad), "--out-dir", str(tmp_path), *TINY_RUN]) == 3

    def test_bad_value(self, dataset_path):
        assert main(["train", "--dataset", str(dataset_path), *TINY_RUN, "--lr", "fast"]) == 2

    def test_config_file(self, dataset_path, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text(f"dataset = {dataset_path}\nout_dir = {tmp_path / 'r'}\nvariant = ablation\nsteps = 99\n")
        assert main(["train", "--config", str(conf), *TINY_RUN]) == 0
        text = (tmp_path / "r" / "resolved_config.txt").read_text()
        assert "variant = ablation" in text and "steps = 2" in text


class TestAblateReport:
    def test_ablate_and_report(self, dataset_path, tmp_path, capsys):
        out = tmp_path / "abl"
        argv = ["ablate", "--dataset", str(dataset_path), "--out-dir", str(out), "--seeds", "0,1", "--include-oracle", *TINY_RUN]
        assert main(argv) == 0
        table = capsys.readouterr().out
        lines = table.splitlines()
        assert re.split(r"\s{2,}", lines[0]) == ["Model", "Accuracy (%)"]
        rows = [re.split(r"\s{2,}", line) for line in lines[2:6]]
        assert [r[0] for r in rows] == ["ProtoNet++", "SimpAux", "SimpAux (constant bridge)", "SimpAux (oracle attributes)"]
        assert all(re.fullmatch(r"\d+\.\d ± \d+\.\d", r[1]) for r in rows)
        assert "Paired delta" in table
        for name in ("comparison.txt", "comparison.csv", "per_seed.csv", "episodes.csv", "resolved_config.txt"):
            assert (out / name).exists()

        assert main(["report", "--dir", str(out), "--out", str(tmp_path / "again.txt")]) == 0
        assert (tmp_path / "again.txt").read_text() == (out / "comparison.txt").read_text()

    def test_single_seed_rejected(self, dataset_path, tmp_path):
        assert main(["ablate", "--dataset", str(dataset_path), "--out-dir", str(tmp_path), "--seeds", "0", *TINY_RUN]) == 2

    def test_report_missing_dir(self, tmp_path):
        assert main(["report", "--dir", str(tmp_path / "nothing")]) == 3


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--only", "dense", "batch_norm", "prototype_loss", "multilabel_soft_margin",
                     "cosine_embedding", "bridge"]) == 0
        out = capsys.readouterr().out
        assert len(re.findall(r"PASS", out)) == 6

    def test_fault_injection_detected(self, monkeypatch, capsys):
        def wrong(g, xhat, inv_std):
            return g * inv_std

        monkeypatch.setattr(layers, "_batch_norm_backward", wrong)
        assert main(["gradcheck", "--only", "batch_norm", "dense"]) == 1
        out = capsys.readouterr().out
        assert re.search(r"batch_norm\s+\S+\s+FAIL", out) and "FAILED: batch_norm" in out

    def test_unknown_component(self):
        assert main(["gradcheck", "--only", "nothing"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "bridgelab", "gradcheck", "--only", "dense"], capture_output=True, text=True)
    assert proc.returncode == 0 and "dense" in proc.stdout
