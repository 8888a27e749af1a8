"""Figure rendering for density histories.

One panel per state: analytic trajectory, empirical ensemble trajectory with
its three-sigma multinomial tube, plus the density cap and the target level
where given.  Files only (Agg backend); the CSV stays the canonical output.
"""

import math
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .simulate import DensityHistory


def render_density_tubes(
    path,
    analytic: DensityHistory,
    empirical: Optional[DensityHistory] = None,
    target=None,
    cap=None,
    dpi: int = 150,
) -> None:
    n = analytic.n
    ncols = 2 if n > 1 else 1
    nrows = math.ceil(n / ncols)
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.2 * ncols, 1.9 * nrows), sharex=True, squeeze=False
    )
    t = np.arange(analytic.steps + 1)
    for i in range(n):
        ax = axes[i // ncols][i % ncols]
        x = analytic.densities[:, i]
        if empirical is not None and empirical.num_agents:
            sigma = np.sqrt(x * (1.0 - x) / empirical.num_agents)
            ax.fill_between(
                t, x - 3 * sigma, x + 3 * sigma, color="tab:red", alpha=0.18, linewidth=0
            )
            ax.plot(t, empirical.densities[:, i], color="tab:blue", lw=0.9, label="ensemble")
        ax.plot(t, x, color="tab:red", lw=1.1, label="analytic")
        if cap is not None and cap[i] < 1.0:
            ax.axhline(cap[i], color="black", ls="--", lw=0.8, label="cap")
        if target is not None:
            ax.axhline(target[i], color="gray", ls=":", lw=0.8, label="target")
        ax.set_ylabel(f"bin {i + 1}")
        if i == 0:
            ax.legend(loc="upper right", fontsize=7, frameon=False)
    for j in range(n, nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    for ax in axes[-1]:
        ax.set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
