import itertools

import numpy as np
import pytest
import torch

import lotop

slow = pytest.mark.slow


def brute_force_signed_rank_p(a, b):
    """The two-sided Wilcoxon p-value by enumeration of all 2**n sign assignments."""
    diff, ranks = lotop.analysis.signed_ranks(a, b)
    doubled = np.rint(2 * ranks).astype(np.int64)
    observed = int(doubled[diff > 0].sum())
    signs = itertools.product((False, True), repeat=len(diff))
    totals = np.array([int(doubled[np.array(positive)].sum()) for positive in signs])
    lower, upper = (totals <= observed).mean(), (totals >= observed).mean()
    return float(min(1.0, 2 * min(lower, upper)))


def smooth_image(m, n, seed=0):
    """A [0, 255] blob texture without motion or noise."""
    cfg = lotop.synth.PhantomConfig((m, n, 2), motion='static', seed=seed)
    return lotop.synth.generate_phantom(cfg).sequence[0]


def random_lattice(domain, spacing, scale, seed):
    lattice = lotop.DeformationLattice.zeros(domain, spacing)
    shape = lattice.control_points.shape
    return lattice.with_control_points(
        scale * lotop.random.standard_normal(shape, seed)
    )


def constant_lattice(domain, spacing, a, b):
    return lotop.DeformationLattice.affine(domain, spacing, [[0, 0], [0, 0]], (a, b))


def cubic_bspline(t):
    """The centered cubic B-spline, supported on (-2, 2)."""
    t = abs(t)
    if t < 1:
        return 2 / 3 - t * t + t**3 / 2
    if t < 2:
        return (2 - t) ** 3 / 6
    return 0.0


def brute_force_eval(lattice, w):
    """Sum the contributions of every control point of the lattice."""
    knots_r = lattice.knot_positions(0).tolist()
    knots_c = lattice.knot_positions(1).tolist()
    sr, sc = lattice.spacing
    total = torch.zeros(2, dtype=torch.float64)
    for i, kr in enumerate(knots_r):
        for j, kc in enumerate(knots_c):
            weight = cubic_bspline((w[0] - kr) / sr) * cubic_bspline((w[1] - kc) / sc)
            total += weight * lattice.control_points[:, i, j]
    return total
