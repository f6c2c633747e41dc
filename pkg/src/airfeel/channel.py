"""Fading-channel draws and the physics of over-the-air gradient aggregation.

Channels are block Rayleigh fading: gains are magnitudes of unit-variance
complex Gaussians, constant within a round and i.i.d. across rounds.  The
receiver estimate divides the superimposed signal by the device count, so the
aggregation error splits exactly into a signal-misalignment part and a
noise part.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "ChannelTrace",
    "AggregationError",
    "AggregateResult",
    "draw_channels",
    "aggregate",
    "error_decomposition",
    "bias_mse_bounds",
    "save_trace",
    "load_trace",
]


@dataclass(frozen=True)
class ChannelTrace:
    """Post-phase-compensation channel magnitudes, one row per device."""

    gains: np.ndarray  # (K, N), all >= 0
    noise_std: float   # receiver noise standard deviation per coordinate

    def __post_init__(self):
        g = np.ascontiguousarray(np.asarray(self.gains, dtype=float))
        if g.ndim != 2:
            raise ValueError("gains must be a K x N matrix")
        if np.any(g < 0):
            raise ValueError("gains are magnitudes and must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        g.flags.writeable = False
        object.__setattr__(self, "gains", g)

    @property
    def K(self) -> int:
        return self.gains.shape[0]

    @property
    def N(self) -> int:
        return self.gains.shape[1]


class AggregateResult(NamedTuple):
    received: np.ndarray   # superimposed signal plus noise
    estimate: np.ndarray   # received / K
    noise: np.ndarray      # the noise realization that was added


@dataclass(frozen=True)
class AggregationError:
    total: np.ndarray
    misalignment: np.ndarray
    noise_part: np.ndarray


def draw_channels(seed: int, K: int, N: int, noise_std: float = 0.0) -> ChannelTrace:
    """Draw i.i.d. Rayleigh gains: magnitudes of CN(0, 1) coefficients."""
    if K < 1 or N < 1:
        raise ValueError("K and N must be >= 1")
    rng = np.random.default_rng(seed)
    re = rng.normal(0.0, np.sqrt(0.5), (K, N))
    im = rng.normal(0.0, np.sqrt(0.5), (K, N))
    return ChannelTrace(np.hypot(re, im), noise_std)


def _amplitudes(gains_n, powers_n):
    gains_n = np.asarray(gains_n, dtype=float)
    powers_n = np.asarray(powers_n, dtype=float)
    if gains_n.shape != powers_n.shape:
        raise ValueError("gains and powers must have matching shape")
    if np.any(powers_n < 0):
        raise ValueError("power scaling factors must be >= 0")
    return gains_n * np.sqrt(powers_n)


def aggregate(local_grads: np.ndarray, gains_n: np.ndarray, powers_n: np.ndarray,
              noise_std: float, rng: np.random.Generator | None = None,
              noise: np.ndarray | None = None) -> AggregateResult:
    """Superimpose amplitude-scaled local gradients and divide by K.

    Receiver noise is real Gaussian with variance noise_std**2 per coordinate;
    pass an explicit `noise` realization to replay a draw.
    """
    grads = np.asarray(local_grads, dtype=float)
    if grads.ndim != 2:
        raise ValueError("local_grads must be a K x q matrix")
    amps = _amplitudes(gains_n, powers_n)
    if amps.shape != (grads.shape[0],):
        raise ValueError("one gain/power per device is required")
    if noise is None:
        if noise_std > 0:
            if rng is None:
                raise ValueError("rng is required to draw noise")
            noise = noise_std * rng.standard_normal(grads.shape[1])
        else:
            noise = np.zeros(grads.shape[1])
    y = amps @ grads + noise
    return AggregateResult(y, y / grads.shape[0], noise)


def error_decomposition(local_grads: np.ndarray, gains_n: np.ndarray,
                        powers_n: np.ndarray,
                        noise_draw: np.ndarray) -> AggregationError:
    """Split the aggregation error into misalignment and noise components."""
    grads = np.asarray(local_grads, dtype=float)
    K = grads.shape[0]
    amps = _amplitudes(gains_n, powers_n)
    misalignment = (amps - 1.0) @ grads / K
    noise_part = np.asarray(noise_draw, dtype=float) / K
    return AggregationError(misalignment + noise_part, misalignment, noise_part)


def bias_mse_bounds(gains_n, powers_n, G_n: float, Ghat_n: float,
                    noise_std: float, K: int, q: int) -> tuple[float, float]:
    """Analytic bias/MSE bounds on the aggregation error for one round.

    The bias bound is returned signed: it is negative whenever the summed
    effective amplitude falls short of K (the squared value is what the
    optimizer consumes).
    """
    if G_n < 0 or Ghat_n < 0:
        raise ValueError("gradient bounds must be >= 0")
    amps = _amplitudes(gains_n, powers_n)
    bias = G_n / K * (float(amps.sum()) - K)
    mse = Ghat_n / K * float(((amps - 1.0) ** 2).sum()) + noise_std ** 2 * q / K ** 2
    return bias, mse


def save_trace(trace: ChannelTrace, path) -> None:
    """Columnar text export: (round, device, gain) rows."""
    K, N = trace.K, trace.N
    rounds = np.repeat(np.arange(1, N + 1), K)
    devices = np.tile(np.arange(K), N)
    gains = trace.gains.T.reshape(-1)
    header = f"noise_std={float(trace.noise_std)!r}\nround device gain"
    np.savetxt(path, np.column_stack([rounds, devices, gains]), header=header)


def load_trace(path) -> ChannelTrace:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# noise_std="):
        raise ValueError("missing noise_std header line")
    noise_std = float(first.split("=", 1)[1])
    table = np.atleast_2d(np.loadtxt(path))
    rounds = table[:, 0].astype(int)
    devices = table[:, 1].astype(int)
    K, N = devices.max() + 1, rounds.max()
    gains = np.zeros((K, N))
    gains[devices, rounds - 1] = table[:, 2]
    return ChannelTrace(gains, noise_std)
