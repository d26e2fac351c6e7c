"""Reverse-time sampling with an exponential integrator.

The reverse process runs from y_0 ~ N(0, I) over a schedule 0 = t_0 < ... < t_N
and at step l evaluates the score at forward time T - t_l.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import make_rng

HALF = "half"
FULL = "full"


@dataclass(frozen=True)
class TimeSchedule:
    times: np.ndarray
    T: float
    delta: float
    kappa: float
    mode: str = "geometric"

    @property
    def N(self) -> int:
        return self.times.shape[0] - 1

    @property
    def gammas(self) -> np.ndarray:
        return np.diff(self.times)

    def score_times(self) -> np.ndarray:
        """Forward times T - t_l at which the score is queried, l = 0..N-1."""
        return self.T - self.times[:-1]


def build_schedule(T: float, delta: float, N: int, kappa: float | None = None,
                   mode: str = "geometric") -> TimeSchedule:
    """Equal steps on [0, T - 1], then shrinking steps toward T - delta.

    ``mode="geometric"`` (default) makes the remaining time T - t decay
    geometrically from 1 to delta over the second half, so every step obeys
    gamma_l <= kappa * min(1, T - t_l) with kappa the larger of the first-half
    step and the geometric rate 1 - delta^(2/N).

    ``mode="literal"`` takes kappa = (T - 1)/(N/2), second-half steps
    kappa/(1+kappa)^l for l = 0..N/2-2 and forces the last point to T - delta,
    rejecting inputs whose steps overshoot. Its step sizes can exceed
    kappa * min(1, T - t_l); that bound is only enforced in geometric mode.
    """
    if N < 4 or N % 2:
        raise ValueError(f"N must be an even integer >= 4, got {N}")
    if not 0 < delta < 1 < T:
        raise ValueError(f"need 0 < delta < 1 < T, got delta={delta}, T={T}")
    h = N // 2
    step = (T - 1.0) / h
    times = np.empty(N + 1)
    times[:h + 1] = step * np.arange(h + 1)
    times[h] = T - 1.0
    if mode == "literal":
        k = step
        if kappa is not None and abs(kappa - k) > 1e-12 * max(1.0, k):
            raise ValueError(f"literal schedule fixes kappa = (T-1)/(N/2) = {k!r}, got {kappa!r}")
        for ell in range(h - 1):
            times[h + ell + 1] = times[h + ell] + k / (1.0 + k) ** ell
        if times[N - 1] >= T - delta:
            raise ValueError(
                f"geometric steps reach t = {float(times[N - 1])!r} >= T - delta = {T - delta!r} "
                f"(overshoot {times[N - 1] - (T - delta):.6g}); increase N or T, or use mode='geometric'")
    elif mode == "geometric":
        rate = -math.expm1(math.log(delta) / h)
        k = max(step, rate)
        if kappa is not None:
            if kappa < k - 1e-12:
                raise ValueError(f"kappa={kappa!r} is below the required {k!r} for these (T, delta, N)")
            k = kappa
        ell = np.arange(1, h)
        times[h + 1:N] = T - delta ** (ell / h)
    else:
        raise ValueError(f"unknown schedule mode {mode!r}")
    times[N] = T - delta
    gam = np.diff(times)
    if np.any(gam <= 0):
        raise ValueError("schedule is not strictly increasing")
    if mode == "geometric":
        bound = k * np.minimum(1.0, T - times[:-1]) + 1e-12
        if np.any(gam > bound):
            bad = int(np.argmax(gam - bound))
            raise ValueError(f"step {bad} of size {gam[bad]!r} exceeds kappa*min(1, T-t) = {bound[bad]!r}")
    return TimeSchedule(times, float(T), float(delta), float(k), mode)


def rho(gamma: float, mode: str = FULL) -> float:
    if mode == FULL:
        return math.exp(gamma)
    if mode == HALF:
        return math.exp(gamma / 2.0)
    raise ValueError(f"unknown rho mode {mode!r}")


def reverse_step(y, score_fn: Callable, t_lo: float, t_hi: float, T: float,
                 rho_mode: str = FULL, rng: np.random.Generator | None = None,
                 z=None) -> np.ndarray:
    """rho y + 2(rho - 1) s(y, T - t_lo) + sqrt(rho^2 - 1) z."""
    if not t_hi > t_lo:
        raise ValueError("need t_hi > t_lo")
    y = np.asarray(y, dtype=float)
    gamma = t_hi - t_lo
    r = rho(gamma, rho_mode)
    if z is None:
        z = rng.standard_normal(y.shape)
    # expm1 keeps rho - 1 and rho^2 - 1 accurate for tiny steps
    rm1 = math.expm1(gamma if rho_mode == FULL else gamma / 2.0)
    r2m1 = math.expm1(2 * gamma if rho_mode == FULL else gamma)
    return r * y + 2.0 * rm1 * score_fn(y, T - t_lo) + math.sqrt(r2m1) * z


@dataclass(frozen=True)
class SamplerConfig:
    schedule: TimeSchedule
    n_samples: int
    seed: int
    rho_mode: str = FULL

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


def generate_samples(score_fn: Callable, config: SamplerConfig, d: int,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the reverse chain for n_samples independent trajectories."""
    if rng is None:
        rng = make_rng(config.seed, "reverse-sampler")
    sch = config.schedule
    y = rng.standard_normal((config.n_samples, d))
    for ell in range(sch.N):
        y = reverse_step(y, score_fn, sch.times[ell], sch.times[ell + 1], sch.T,
                         config.rho_mode, rng)
    return y


def gaussian_step_moments(m: float, v: float, gamma: float, s_lin: float, s_off: float,
                          rho_mode: str = FULL) -> tuple[float, float]:
    """Mean/variance map of one step when the score is affine, s(y) = s_lin*y + s_off."""
    r = rho(gamma, rho_mode)
    a = r + 2.0 * (r - 1.0) * s_lin
    return a * m + 2.0 * (r - 1.0) * s_off, a * a * v + (r * r - 1.0)
