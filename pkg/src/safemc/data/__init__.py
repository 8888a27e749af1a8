"""Bundled example data: an 8-bin swarm redistribution problem with five
observable actions, a stay-put OFF mode, density caps on the interior bins
and a published reference policy for it."""

import json
from importlib import resources

import numpy as np


def paper_example_path():
    """Filesystem path of the bundled problem file."""
    return resources.files(__name__) / "paper_example.json"


def load_paper_problem() -> dict:
    with (resources.files(__name__) / "paper_example.json").open() as fh:
        return json.load(fh)


def load_paper_policy() -> tuple:
    """Reference solution variables for the bundled problem.

    Returns ``(alpha, Q)``: selection probabilities with shape (m, n) and a
    list of m acceptance matrices.  The values are rounded to four decimals,
    so recompositions carry a rounding budget of roughly 1e-2.
    """
    with (resources.files(__name__) / "paper_policy.json").open() as fh:
        raw = json.load(fh)
    alpha = np.asarray(raw["alpha"], dtype=float)
    q_list = [np.asarray(q, dtype=float) for q in raw["Q"]]
    return alpha, q_list
