"""Optional PNG renderings of curve files.

Only imported when figures are requested, so the core library never needs a
display or a matplotlib install at import time.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def plot_curve(rows, path, *, ylabel: str, xlabel: str = "acceptance probability $p_a$",
               logx: bool = True, title: str | None = None) -> Path:
    """Line plot of ``(p_a, value, stderr)`` rows, with a 2-SE band when nonzero."""
    rows = sorted(rows)
    x = [r[0] for r in rows]
    y = [r[1] for r in rows]
    se = [r[2] for r in rows]
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, y, marker="o", ms=3, lw=1.2, color="black")
        if any(s > 0 for s in se):
            lo = [a - 2 * s for a, s in zip(y, se)]
            hi = [a + 2 * s for a, s in zip(y, se)]
            ax.fill_between(x, lo, hi, color="0.8", lw=0)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        # no version stamp, so the bytes depend only on the data
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
