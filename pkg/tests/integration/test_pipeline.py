"""
Integration tests for the evaluation pipeline and the command line in main.py.
"""
import numpy as np
import pandas as pd
import pytest

from app.harness import SWEEP_COLUMNS, evaluate, extract_features, report_emit, sweep
from backend.checkpoint import save_checkpoint
from backend.errors import ConfigurationError, DimensionError
from backend.models import SplitSpec
from backend.network import build
from main import build_configs, build_parser, main, read_config_file


class TestEvaluatePipeline:
    """Checkpoint -> features -> repeated SVM splits -> report files."""

    @pytest.mark.integration
    def test_evaluate_checkpoint(self, tiny_config, small_dataset, tmp_path):
        path = save_checkpoint(build(tiny_config.model_copy(update={"num_classes": 3})), tmp_path / "net.rtpc")
        report = evaluate(path, small_dataset, SplitSpec(training_ratio=0.5, repeats=3))
        assert report.repeats == 3
        assert all(0.0 <= a <= 100.0 for a in report.accuracies)
        for matrix in report.confusions:
            assert np.asarray(matrix).sum() == 6
        written = report_emit(report, tmp_path / "eval")
        assert (tmp_path / "eval" / "summary.txt") in written

    @pytest.mark.integration
    def test_pathway_selection_shortens_features(self, tiny_config, small_dataset):
        features = extract_features(build(tiny_config), small_dataset, batch_size=5)
        assert features.dim == 256
        assert features.select_pathway("conv5_2_only").dim == 128
        report = evaluate(build(tiny_config), small_dataset, SplitSpec(train_per_class=2, repeats=1),
                          pathways="conv5_1_only")
        assert report.std == 0.0

    @pytest.mark.integration
    def test_image_size_mismatch(self, tiny_config, small_dataset):
        net = build(tiny_config.model_copy(update={"input_size": (96, 96)}))
        with pytest.raises(DimensionError):
            evaluate(net, small_dataset, SplitSpec(training_ratio=0.5))


    @pytest.mark.integration
    def test_sweep_table(self, tiny_config, small_dataset):
        """Rows run network-major, then pathway selection, then ratio; cells match evaluate()."""
        config = tiny_config.model_copy(update={"num_classes": 3})
        networks = {"a": build(config), "b": build(config.model_copy(update={"seed": 8}))}
        table = sweep(networks, small_dataset, [0.25, 0.5], repeats=2, pathways=["both", "conv5_2_only"])
        assert list(table.columns) == SWEEP_COLUMNS
        assert list(table["network"]) == ["a"] * 4 + ["b"] * 4
        assert list(table["pathways"][:4]) == ["both", "both", "conv5_2_only", "conv5_2_only"]
        assert list(table["ratio"][:2]) == [0.25, 0.5]
        report = evaluate(networks["a"], small_dataset, SplitSpec(training_ratio=0.5, repeats=2))
        assert table.loc[1, "mean"] == pytest.approx(report.mean)
        assert table.loc[1, "std"] == pytest.approx(report.std)

    @pytest.mark.integration
    def test_sweep_rejects_bad_ratio(self, tiny_config, small_dataset):
        with pytest.raises(ConfigurationError):
            sweep({"a": build(tiny_config)}, small_dataset, [1.5])


class TestConfigFiles:
    """key=value configuration merged with command-line flags."""

    @pytest.mark.integration
    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("# tiny run\ndepth=34\nwidth=0.25\ninput_size=64\nepochs=3\nfreeze=conv1, conv2\nmirror=true\n")
        args = build_parser().parse_args(["train", "--data", "m.csv", "--out", "n.rtpc", "--depth", "18"])
        network, train_cfg, _ = build_configs(read_config_file(str(cfg)), args)
        assert network.depth == 18
        assert network.input_size == (64, 64)
        assert train_cfg.epochs == 3
        assert train_cfg.freeze_set == ["conv1", "conv2"]
        assert train_cfg.augmentation.mirror is True

    @pytest.mark.integration
    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate=0.1\n")
        with pytest.raises(ConfigurationError, match="unknown key"):
            read_config_file(str(cfg))


class TestCommandLine:
    """main() exit codes and printed results."""

    @pytest.mark.integration
    def test_inspect(self, capsys):
        assert main(["inspect", "--depth", "18"]) == 0
        out = capsys.readouterr().out
        assert "representation length: 1024" in out
        assert "conv5_2_x" in out

    @pytest.mark.integration
    def test_too_small_input_is_config_error(self, capsys):
        assert main(["inspect", "--input", "60"]) == 2
        assert capsys.readouterr().err.startswith("config error:")

    @pytest.mark.integration
    def test_gradcheck_single_op(self, capsys):
        assert main(["gradcheck", "--op", "relu", "--probes", "4"]) == 0
        assert "worst:" in capsys.readouterr().out

    @pytest.mark.integration
    def test_missing_checkpoint_is_io_error(self, tmp_path, synth_dir, capsys):
        code = main(["evaluate", "--ckpt", str(tmp_path / "none.rtpc"), "--data", str(synth_dir / "manifest.csv")])
        assert code == 7
        assert capsys.readouterr().err.startswith("io error:")

    @pytest.mark.integration
    def test_sweep_command_writes_table(self, tiny_config, synth_dir, tmp_path, capsys):
        path = save_checkpoint(build(tiny_config.model_copy(update={"num_classes": 3})), tmp_path / "net.rtpc")
        out = tmp_path / "sweep.csv"
        code = main(["sweep", "--ckpt", f"tiny={path}", "--data", str(synth_dir / "manifest.csv"),
                     "--ratios", "0.25,0.5", "--repeats", "2", "--pathways", "both", "5_1", "--out", str(out)])
        assert code == 0
        frame = pd.read_csv(out)
        assert len(frame) == 4
        assert set(frame["network"]) == {"tiny"}
        assert set(frame["pathways"]) == {"both", "conv5_1_only"}
        assert "conv5_1_only" in capsys.readouterr().out

    @pytest.mark.integration
    def test_sweep_ratios_must_be_numbers(self, tiny_config, synth_dir, tmp_path, capsys):
        path = save_checkpoint(build(tiny_config.model_copy(update={"num_classes": 3})), tmp_path / "net.rtpc")
        assert main(["sweep", "--ckpt", str(path), "--data", str(synth_dir / "manifest.csv"), "--ratios", "ten"]) == 2
        assert capsys.readouterr().err.startswith("config error:")

    @pytest.mark.integration
    def test_classify_needs_features(self, tmp_path):
        assert main(["classify", "--model", str(tmp_path / "m.svm")]) == 2

    @pytest.mark.integration
    @pytest.mark.slow
    def test_train_extract_classify_evaluate(self, tmp_path, capsys):
        data = tmp_path / "synth"
        assert main(["synth", "--out", str(data), "--classes", "3", "--per-class", "4", "--size", "64",
                     "--seed", "2"]) == 0
        manifest = str(data / "manifest.csv")
        ckpt = str(tmp_path / "net.rtpc")
        assert main(["train", "--data", manifest, "--out", ckpt, "--width", "0.25", "--input", "64",
                     "--epochs", "1", "--metrics", str(tmp_path / "metrics.csv")]) == 0
        assert (tmp_path / "metrics.csv").exists()
        assert "eval-mode accuracy on 12 training images" in capsys.readouterr().out

        features = str(tmp_path / "features.csv")
        assert main(["extract", "--ckpt", ckpt, "--data", manifest, "--out", features]) == 0
        model = str(tmp_path / "m.svm")
        assert main(["classify", "--train", features, "--test", features, "--model", model,
                     "--predictions", str(tmp_path / "pred.csv")]) == 0
        assert "accuracy on 12 samples" in capsys.readouterr().out

        assert main(["evaluate", "--ckpt", ckpt, "--data", manifest, "--ratio", "0.5", "--repeats", "2",
                     "--out", str(tmp_path / "eval")]) == 0
        summary = (tmp_path / "eval" / "summary.txt").read_text(encoding="utf-8").strip()
        assert capsys.readouterr().out.strip().endswith(summary)
