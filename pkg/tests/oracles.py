"""Independent brute-force references used by several test modules."""

from __future__ import annotations


def brute_force_operating_points(bonafide, spoof):
    """(threshold, FAR, FRR) by direct counting at a threshold below the
    minimum, between every pair of adjacent distinct scores, and above the
    maximum. Accept means ``score >= threshold``."""
    distinct = sorted(set(bonafide) | set(spoof))
    candidates = [distinct[0] - 1.0]
    candidates += [(a + b) / 2 for a, b in zip(distinct, distinct[1:])]
    candidates.append(distinct[-1] + 1.0)
    points = []
    for t in candidates:
        far = sum(1 for s in spoof if s >= t) / len(spoof)
        frr = sum(1 for s in bonafide if s < t) / len(bonafide)
        points.append((t, far, frr))
    return points


def brute_force_eer(bonafide, spoof):
    """EER by scanning the brute-force operating points for the FAR/FRR
    crossing and interpolating linearly between the bracketing points."""
    points = brute_force_operating_points(bonafide, spoof)
    for _, far, frr in points:
        if far == frr:
            return far
    for (_, far0, frr0), (_, far1, frr1) in zip(points, points[1:]):
        d0, d1 = far0 - frr0, far1 - frr1
        if d0 > 0 > d1:
            alpha = d0 / (d0 - d1)
            return far0 + alpha * (far1 - far0)
    raise AssertionError("no crossing found")
