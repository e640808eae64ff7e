"""Self-contained SVG line plots of training curves."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def curves_svg(path, runs: dict[str, list], title: str = "") -> Path:
    """Plot NELBO and cluster violation against step, one line per labelled run.

    ``runs`` maps a label to a list of metric rows with ``step``, ``nelbo``
    and ``violation`` attributes.
    """
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for label, rows in runs.items():
        steps = [r.step for r in rows]
        top.plot(steps, [r.nelbo for r in rows], label=label, linewidth=1)
        bottom.plot(steps, [r.violation for r in rows], label=label, linewidth=1)
    top.set_ylabel("nelbo")
    bottom.set_ylabel("cluster violation")
    bottom.set_xlabel("step")
    top.legend(loc="upper right", fontsize="small")
    if title:
        top.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
