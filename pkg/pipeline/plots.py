"""
SVG accuracy curves from an eval report: relaxed accuracy over k and the
edit-distance curve. Output is byte-stable for identical reports.
"""

import io
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update(
    {
        "font.family": "DejaVu Sans",
        "axes.unicode_minus": False,
        "svg.hashsalt": "forcesim",
        "svg.fonttype": "none",
    }
)
import matplotlib.pyplot as plt  # noqa: E402

from learning.evaluate import EDIT_DS, RELAX_KS, EvalReport  # noqa: E402
from pipeline.storage import atomic_write  # noqa: E402

logger = logging.getLogger(__name__)


def relaxed_points(report: EvalReport) -> tuple[list[int], list[float]]:
    return list(RELAX_KS), [report.relaxed[k] for k in RELAX_KS]


def edit_points(report: EvalReport) -> tuple[list[int], list[float]]:
    return list(EDIT_DS), [report.edit_curve[d] for d in EDIT_DS]


def _render(xs: list[int], ys: list[float], xlabel: str, title: str) -> bytes:
    fig, ax = plt.subplots(figsize=(4.5, 3.4), constrained_layout=True)
    ax.plot(xs, ys, marker="o", color="tab:blue")
    ax.set_xticks(xs)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("Accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def plot_report(report: EvalReport, out_prefix: str | Path) -> tuple[Path, Path]:
    """Write <prefix>_relaxed.svg and <prefix>_edit.svg; returns both paths."""
    out_prefix = Path(out_prefix)
    relaxed_path = out_prefix.with_name(out_prefix.name + "_relaxed.svg")
    edit_path = out_prefix.with_name(out_prefix.name + "_edit.svg")
    atomic_write(relaxed_path, _render(*relaxed_points(report), "k (nearest directions accepted)", "Relaxed accuracy"))
    atomic_write(edit_path, _render(*edit_points(report), "edit distance", "Within edit distance"))
    logger.info("wrote %s and %s", relaxed_path, edit_path)
    return relaxed_path, edit_path
