"""Sqrt noise schedule and derived quantities.

Convention: t=0 is (almost) clean data, t=T is near-pure noise. The raw
schedule is alpha_bar(t) = 1 - sqrt(t/T + s); per-step betas are derived
from consecutive ratios, clipped from above, and alpha_bar is then
recomputed from the clipped betas so that the recurrence
alpha_bar[t] = alpha_bar[t-1] * (1 - beta[t]) holds exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time variance-preserving schedule over t = 0..T.

    beta is indexed 1..T (beta[0] is a placeholder and never used);
    alpha_bar is indexed 0..T.
    """

    T: int
    s: float
    beta_clip_max: float
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.beta.setflags(write=False)
        self.alpha_bar.setflags(write=False)

    def _check_t(self, t: int):
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [0, {self.T}]")

    def alpha_hat(self, t: int) -> float:
        """Signal coefficient sqrt(alpha_bar[t])."""
        self._check_t(t)
        return math.sqrt(self.alpha_bar[t])

    def sigma(self, t: int) -> float:
        """Noise coefficient sqrt(1 - alpha_bar[t])."""
        self._check_t(t)
        return math.sqrt(1.0 - self.alpha_bar[t])

    def lambda_of(self, t: int) -> float:
        """Half log-SNR ln(alpha_hat / sigma); strictly decreasing in t."""
        self._check_t(t)
        ab = self.alpha_bar[t]
        if ab >= 1.0:
            raise ValueError(f"lambda undefined at t={t}: sigma is zero")
        return 0.5 * math.log(ab / (1.0 - ab))

    def posterior_coeffs(self, t: int) -> tuple[float, float, float]:
        """Coefficients (c_zt, c_z0, var) of the Gaussian posterior mean
        mu(z_t, z_0) = c_zt * z_t + c_z0 * z_0 for the t -> t-1 step,
        with the standard DDPM posterior variance."""
        if not 1 <= t <= self.T:
            raise ValueError(f"posterior requires 1 <= t <= T, got {t}")
        ab_prev = self.alpha_bar[t - 1]
        ab = self.alpha_bar[t]
        beta = self.beta[t]
        alpha = 1.0 - beta
        c_zt = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
        c_z0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        return c_zt, c_z0, var

    def respace(self, count: int) -> "TimestepGrid":
        """Evenly spaced (in t) grid of count+1 timesteps from T down to 0."""
        return respace(self, count)

    def dump_csv(self, path):
        """Write (t, beta, alpha_bar, sigma, lambda) rows for debugging."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha_bar", "sigma", "lambda"])
            for t in range(self.T + 1):
                beta = self.beta[t] if t >= 1 else ""
                w.writerow([t, beta, self.alpha_bar[t], self.sigma(t),
                            self.lambda_of(t)])


@dataclass(frozen=True)
class TimestepGrid:
    """Strictly decreasing integer timesteps from T down to 0."""

    steps: tuple[int, ...]

    def __post_init__(self):
        if len(self.steps) < 2:
            raise ValueError("grid needs at least two points")
        if any(a >= b for a, b in zip(self.steps[1:], self.steps[:-1])):
            raise ValueError("grid must be strictly decreasing")
        if self.steps[-1] != 0:
            raise ValueError("grid must end at t=0")

    @property
    def count(self) -> int:
        return len(self.steps) - 1


def build_sqrt_schedule(T: int, s: float = 1e-4,
                        beta_clip_max: float = 0.999) -> NoiseSchedule:
    """Construct the sqrt schedule alpha_bar(t) = 1 - sqrt(t/T + s).

    The raw formula turns negative at t = T for small s, so betas are
    clipped to beta_clip_max and alpha_bar recomputed from the clipped
    betas; all stored quantities then satisfy the exact recurrence.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < s < 1.0:
        raise ValueError("s must be in (0, 1)")
    if not 0.0 < beta_clip_max < 1.0:
        raise ValueError("beta_clip_max must be in (0, 1)")

    t = np.arange(T + 1, dtype=np.float64)
    raw = 1.0 - np.sqrt(t / T + s)

    beta = np.zeros(T + 1, dtype=np.float64)
    for i in range(1, T + 1):
        if raw[i - 1] <= 0.0 or raw[i] <= 0.0:
            beta[i] = beta_clip_max
        else:
            beta[i] = min(1.0 - raw[i] / raw[i - 1], beta_clip_max)

    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = raw[0]
    for i in range(1, T + 1):
        alpha_bar[i] = alpha_bar[i - 1] * (1.0 - beta[i])

    return NoiseSchedule(T=T, s=s, beta_clip_max=beta_clip_max,
                         beta=beta, alpha_bar=alpha_bar)


def respace(sched: NoiseSchedule, count: int,
            spacing: str = "t") -> TimestepGrid:
    """count+1 timesteps from T to 0, endpoints exact.

    spacing="t" (default) is even in t; spacing="lambda" is even in
    half-log-SNR, mapped back to the nearest integer timestep.
    """
    if not 1 <= count <= sched.T:
        raise ValueError(f"count must be in [1, T={sched.T}], got {count}")
    if spacing == "t":
        pts = np.linspace(sched.T, 0, count + 1)
    elif spacing == "lambda":
        lams = np.array([sched.lambda_of(t) for t in range(sched.T + 1)])
        targets = np.linspace(lams[sched.T], lams[0], count + 1)
        pts = np.array([np.argmin(np.abs(lams - lv)) for lv in targets],
                       dtype=np.float64)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    steps = [int(round(p)) for p in pts]
    steps[0], steps[-1] = sched.T, 0
    # rounding can collide on coarse T; nudge to keep strict decrease
    for i in range(1, len(steps)):
        if steps[i] >= steps[i - 1]:
            steps[i] = steps[i - 1] - 1
    if steps[-1] != 0:
        raise ValueError("respacing produced an invalid grid")
    return TimestepGrid(steps=tuple(steps))
