"""Speaker distance estimation by sweeping the query distance."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .losses import DEFAULT, LossConfig, isdr_floor, loss_inactive


@dataclass(frozen=True)
class SweepConfig:
    d_min: float = 0.5
    d_max: float = 5.0
    step: float = 0.5
    window: float = 1.0
    peak_min_prominence: float = 3.0

    def __post_init__(self):
        if self.d_min <= 0 or self.step <= 0 or self.window < 0:
            raise ValueError("d_min and step must be positive, window non-negative")

    @classmethod
    def for_range(cls, d_max, step=0.5, **kw):
        """Grid ``step, 2*step, ..., d_max`` (the range ``0 - d_max`` without 0)."""
        return cls(d_min=step, d_max=d_max, step=step, **kw)

    def grid(self) -> np.ndarray:
        n = int(np.floor((self.d_max - self.d_min) / self.step + 1e-9)) + 1
        if n < 1:
            raise ValueError(f"empty query grid for [{self.d_min}, {self.d_max}] step {self.step}")
        return np.round(self.d_min + self.step * np.arange(n), 10)


@dataclass
class SweepCurve:
    """``scores`` drive peak detection; ``tiebreak`` (optional) picks the
    position inside a plateau of equal scores."""
    grid: np.ndarray
    scores: np.ndarray
    point_scores: np.ndarray
    tiebreak: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.scores = np.asarray(self.scores, dtype=float)
        self.point_scores = np.asarray(self.point_scores, dtype=float)
        if self.tiebreak is not None:
            self.tiebreak = np.asarray(self.tiebreak, dtype=float)
        if not (len(self.grid) == len(self.scores) == len(self.point_scores)):
            raise ValueError("grid and scores must have equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["d_q", "point_iSDR", "windowed_score"])
            for row in zip(self.grid, self.point_scores, self.scores):
                w.writerow([f"{v:.6f}" for v in row])


def window_sum(grid, point_scores, window, compensate=False):
    """Sum of point scores within +-window/2 of each grid point.

    With ``compensate`` a window truncated by the grid ends is scaled up to
    the size of a full window, so a constant curve stays flat.
    """
    half = window / 2.0 + 1e-9
    inside = np.abs(grid[:, None] - grid[None, :]) <= half
    sums = inside.astype(float) @ point_scores
    if compensate:
        counts = inside.sum(axis=1)
        sums = sums * counts.max() / counts
    return sums


def sweep(model, y, cfg: SweepConfig = SweepConfig(), loss_cfg: LossConfig = DEFAULT) -> SweepCurve:
    """Inactive-SDR of ``model(y, d_q)`` over the grid, summed over a sliding window.

    Scores are window sums of ``iSDR - floor`` (floor = score of a silent
    output). Windows cut short by the grid ends are rescaled to full size, so
    a silent model yields a flat curve; the plain sums break plateau ties.

    ``model`` is any ``(mixture, d_q) -> estimate`` callable; when it also has
    ``extract_many(mixture, d_qs)`` the grid is evaluated in batches.
    """
    y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
    grid = cfg.grid()
    if hasattr(model, "extract_many"):
        estimates = model.extract_many(y, list(grid))
    else:
        estimates = [model(y, float(d)) for d in grid]
    points = np.array([loss_inactive(y, np.asarray(e, dtype=np.float64), loss_cfg) for e in estimates])
    # excess over the score of a silent output, so every term is >= 0
    excess = points - isdr_floor(y, loss_cfg)
    return SweepCurve(grid, window_sum(grid, excess, cfg.window, compensate=True), points,
                      tiebreak=window_sum(grid, excess, cfg.window))


def _prominence(s, i):
    """Topographic prominence of sample ``i``; a missing side does not bound it."""
    v = s[i]
    bases = []
    j = i - 1
    low = v
    while j >= 0 and s[j] <= v:
        low = min(low, s[j])
        j -= 1
    if j >= 0:
        bases.append(low)
    left_low = low
    j = i + 1
    low = v
    while j < len(s) and s[j] <= v:
        low = min(low, s[j])
        j += 1
    if j < len(s):
        bases.append(low)
    right_low = low
    if not bases:
        # highest point overall: drop to the lower of its two sides
        return v - min(left_low, right_low)
    return v - max(bases)


def _same(a, b):
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))


def detect_peaks(curve: SweepCurve, cfg: SweepConfig = SweepConfig()):
    """Local maxima (endpoints allowed) with prominence >=
    ``cfg.peak_min_prominence``; highest score first.

    A plateau counts once. It is located at the centre of its members with
    the best ``curve.tiebreak`` value (all members when there is none), so
    the estimate may fall between grid points.
    """
    s = curve.scores
    n = len(s)
    peaks = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and _same(s[j + 1], s[i]):
            j += 1
        left_ok = i == 0 or s[i - 1] < s[i]
        right_ok = j == n - 1 or s[j + 1] < s[i]
        if left_ok and right_ok and not (i == 0 and j == n - 1):
            prom = _prominence(s, i) if j == i else _prominence(np.r_[s[:i + 1], s[j + 1:]], i)
            if prom >= cfg.peak_min_prominence:
                members = np.arange(i, j + 1)
                if curve.tiebreak is not None:
                    tb = curve.tiebreak[i:j + 1]
                    members = members[[_same(v, tb.max()) for v in tb]]
                peaks.append((float(curve.grid[members].mean()), float(s[i])))
        i = j + 1
    return sorted(peaks, key=lambda p: -p[1])


def mae_eval(estimates, truths):
    """Mean |highest peak - nearest true distance|.

    ``estimates`` holds, per mixture, either a peak list from
    :func:`detect_peaks`, a bare distance, or None/empty when nothing was
    detected. Mixtures without a peak are excluded from the mean and counted
    in ``n_missed``.
    """
    errors, missed = [], 0
    for est, true in zip(estimates, truths):
        if est is None or (isinstance(est, (list, tuple)) and not est):
            missed += 1
            continue
        d = est[0][0] if isinstance(est, (list, tuple)) else float(est)
        errors.append(min(abs(d - t) for t in true))
    return {"mae": float(np.mean(errors)) if errors else None, "n": len(errors), "n_missed": missed}
