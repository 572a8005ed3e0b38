from PIL import Image

from shapebias.evaluation import EvalReport, EvalRow
from shapebias.plotting import plot_robustness, plot_training_log, plot_transform_curves


def _is_png(path):
    with Image.open(path) as img:
        return img.format == "PNG" and img.size[0] > 100


def test_transform_curves_skip_non_numeric(tmp_path):
    report = EvalReport([
        EvalRow("std", "saturation", "0.25", 10, 0.5, 0.6),
        EvalRow("std", "saturation", "1024", 10, 0.2, None),
        EvalRow("at", "saturation", "1024", 10, 0.4, 0.5),
        EvalRow("std", "identity", "-", 10, 0.9, 1.0),
        EvalRow("std", "fourier_low", "0.3", 10, 0.3, 0.35),
    ])
    drawn = plot_transform_curves(report, tmp_path / "curves.png")
    assert sorted(drawn) == ["fourier_low", "saturation"]
    assert _is_png(tmp_path / "curves.png")


def test_empty_report_draws_nothing(tmp_path):
    assert plot_transform_curves(EvalReport([]), tmp_path / "none.png") == []


def test_training_log_and_robustness_plots(tmp_path):
    records = [{"epoch": 1, "loss": 2.0, "train_acc": 0.1, "val_acc": None, "seconds": 1.0},
               {"epoch": 2, "loss": 1.5, "train_acc": 0.3, "val_acc": 0.25, "seconds": 1.0}]
    plot_training_log(records, tmp_path / "log.png", title="m")
    plot_robustness([("std", 0.9, 0.0), ("at", 0.7, 0.4)], tmp_path / "rob.png")
    assert _is_png(tmp_path / "log.png")
    assert _is_png(tmp_path / "rob.png")
