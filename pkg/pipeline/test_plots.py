"""
Tests for the SVG accuracy curves.
"""

from learning.evaluate import EvalReport
from pipeline.plots import edit_points, plot_report, relaxed_points


def _report(strict: float = 0.3) -> EvalReport:
    return EvalReport(
        strict_accuracy=strict,
        relaxed={k: strict + 0.1 * k for k in range(5)},
        edit_curve={d: min(1.0, strict + 0.15 * d) for d in range(6)},
        per_category={"box": strict},
        n_samples=10,
        n_distinct_gt_patterns=4,
        majority_accuracy=0.2,
        chance_level=0.001,
    )


def test_curve_points_match_the_report():
    report = _report()
    xs, ys = relaxed_points(report)
    assert xs == [0, 1, 2, 3, 4]
    assert ys == [report.relaxed[k] for k in xs]
    assert ys[0] == report.strict_accuracy

    xs, ys = edit_points(report)
    assert xs == [0, 1, 2, 3, 4, 5]
    assert ys == [report.edit_curve[d] for d in xs]


def test_plot_writes_two_svgs(tmp_path):
    relaxed_path, edit_path = plot_report(_report(), tmp_path / "run")
    assert relaxed_path.name == "run_relaxed.svg"
    assert edit_path.name == "run_edit.svg"
    for path in (relaxed_path, edit_path):
        text = path.read_text()
        assert text.lstrip().startswith("<?xml")
        assert "<svg" in text


def test_plot_is_byte_identical_for_identical_reports(tmp_path):
    first = plot_report(_report(), tmp_path / "a")
    second = plot_report(_report(), tmp_path / "b")
    for p, q in zip(first, second):
        assert p.read_bytes() == q.read_bytes()


def test_plot_differs_when_report_differs(tmp_path):
    first, _ = plot_report(_report(0.3), tmp_path / "a")
    second, _ = plot_report(_report(0.5), tmp_path / "b")
    assert first.read_bytes() != second.read_bytes()
