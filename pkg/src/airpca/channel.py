"""Broadband over-the-air aggregation with truncated channel inversion.

Every gradient element travels on its own sub-channel use with an
independent Rayleigh gain, so each element has its own active-device count.
All powers are linear milliwatts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NU_FLOOR = 1e-12
EULER_GAMMA = 0.57721566490153286061


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def mw_to_dbm(mw: float) -> float:
    return 10.0 * math.log10(mw)


def exponential_integral(x: float) -> float:
    """E1(x) = int_x^inf exp(-t)/t dt for x > 0.

    Power series below x = 1, modified Lentz continued fraction above.
    """
    x = float(x)
    if not x > 0:
        raise ValueError(f"exponential integral needs x > 0, got {x}")
    if x <= 1.0:
        total, term, k = 0.0, 1.0, 0
        while True:
            k += 1
            term *= -x / k
            inc = term / k
            total += inc
            if abs(inc) < 1e-17 * abs(total) or k > 200:
                break
        return -EULER_GAMMA - math.log(x) - total
    if x > 700:
        return 0.0
    # E1(x) = exp(-x) / (x + 1 - 1/(x + 3 - 4/(x + 5 - ...)))
    tiny = 1e-300
    b = x + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        a = -float(i * i)
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x)


@dataclass(frozen=True)
class ChannelConfig:
    M: int
    G: float
    sigma2: float
    p_bar: float
    p_outage: float = 0.0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.G > 0:
            raise ValueError("truncation threshold G must be > 0")
        if not self.sigma2 >= 0:
            raise ValueError("sigma2 must be >= 0")
        if not self.p_bar > 0:
            raise ValueError("p_bar must be > 0")
        if not 0 <= self.p_outage < 1:
            raise ValueError("p_outage must lie in [0, 1)")

    @classmethod
    def from_dbm(cls, M, G, p_bar_dbm, noise_power_dbm, p_outage=0.0):
        """Total noise power over the band is split evenly across the M sub-channels."""
        return cls(M=M, G=G, sigma2=dbm_to_mw(noise_power_dbm) / M, p_bar=dbm_to_mw(p_bar_dbm), p_outage=p_outage)

    @property
    def zeta_act(self) -> float:
        return math.exp(-self.G)


def max_avg_receive_power(cfg: ChannelConfig) -> float:
    """Largest average receive power P_bar / (M E1(G)) that respects the transmit budget."""
    return cfg.p_bar / (cfg.M * exponential_integral(cfg.G))


@dataclass(frozen=True)
class ChannelRealization:
    gains: np.ndarray  # (K, c) complex
    active_mask: np.ndarray  # (K, c) bool
    noise: np.ndarray  # (c,) complex
    active_count: np.ndarray  # (c,) int
    subchannels: int = 1


def sample_channel(cfg: ChannelConfig, K: int, c: int, rng) -> ChannelRealization:
    if K < 1 or c < 1:
        raise ValueError("need K >= 1 and c >= 1")
    rng = np.random.default_rng(rng)
    gains = (rng.standard_normal((K, c)) + 1j * rng.standard_normal((K, c))) * math.sqrt(0.5)
    noise = (rng.standard_normal(c) + 1j * rng.standard_normal(c)) * math.sqrt(0.5 * cfg.sigma2)
    mask = (gains.real**2 + gains.imag**2) >= cfg.G
    if cfg.p_outage > 0:
        connected = rng.random(K) >= cfg.p_outage
        mask &= connected[:, None]
    return ChannelRealization(gains, mask, noise, mask.sum(axis=0), cfg.M)


def complex_vectorize(g) -> np.ndarray:
    """Column-major flatten, zero-pad to even length, pair entries as (real, imag)."""
    flat = np.asarray(g, dtype=float).ravel(order="F")
    if flat.size % 2:
        flat = np.append(flat, 0.0)
    return flat[0::2] + 1j * flat[1::2]


def devectorize(v, D: int, d: int) -> np.ndarray:
    v = np.asarray(v)
    c = (D * d + 1) // 2
    if v.shape != (c,):
        raise ValueError(f"expected {c} complex elements for a {D}x{d} matrix, got {v.shape}")
    flat = np.empty(2 * c)
    flat[0::2] = v.real
    flat[1::2] = v.imag
    return flat[: D * d].reshape((D, d), order="F")


@dataclass(frozen=True)
class NormalizationStats:
    eta: float
    nu: float


def compute_normalization(local_gradients) -> NormalizationStats:
    """Pooled mean and standard deviation of every gradient entry on every device."""
    if len(local_gradients) == 0:
        raise ValueError("need at least one local gradient")
    pooled = np.asarray(local_gradients, dtype=float).ravel()
    eta = float(pooled.mean())
    nu = float(np.sqrt(np.mean((pooled - eta) ** 2)))
    return NormalizationStats(eta, max(nu, NU_FLOOR))


@dataclass(frozen=True)
class RoundTransmission:
    received: np.ndarray
    noisy_gradient: np.ndarray
    per_device_tx_power: np.ndarray
    combined_noise: np.ndarray
    empty_elements: int = 0


def transmit_and_aggregate(local_gradients, stats: NormalizationStats, realization: ChannelRealization, p_rx: float):
    """One uplink round: normalize, invert the channel, superpose, de-normalize.

    ``per_device_tx_power`` is the precoder energy averaged per OFDM symbol,
    i.e. (M / c) * sum_i |p_i|^2, which is the quantity bounded by P_bar.
    Elements that no device transmitted fall back to ``eta``.
    """
    if not p_rx > 0:
        raise ValueError("p_rx must be positive")
    grads = np.asarray(local_gradients, dtype=float)
    K, D, d = grads.shape
    c = (D * d + 1) // 2
    if realization.gains.shape != (K, c):
        raise ValueError(f"channel realization shape {realization.gains.shape} does not match ({K}, {c})")
    eta, nu = stats.eta, stats.nu
    if nu < NU_FLOOR:
        log.warning("normalization std %g below floor; using nu = 1", nu)
        nu = 1.0

    # normalized symbols, one row per device (column-major per device); the odd-length pad stays at zero
    flat = np.zeros((K, 2 * c))
    flat[:, : D * d] = ((grads - eta) / nu).transpose(0, 2, 1).reshape(K, D * d)
    s = flat[:, 0::2] + 1j * flat[:, 1::2]

    mask = realization.active_mask
    h = realization.gains
    root_p = math.sqrt(p_rx)
    precoder = np.zeros_like(h)
    precoder[mask] = root_p / h[mask]
    y = np.sum(h * precoder * s, axis=0) + realization.noise

    counts = realization.active_count
    empty = counts == 0
    safe = np.where(empty, 1, counts)
    est = (nu / root_p) * y / safe + eta * (1 + 1j)
    if empty.any():
        est[empty] = eta * (1 + 1j)
        log.debug("%d gradient elements had no active device", int(empty.sum()))

    noisy = devectorize(est, D, d)
    power = (realization.subchannels / c) * np.sum(np.abs(precoder) ** 2, axis=1)
    return RoundTransmission(
        received=y,
        noisy_gradient=noisy,
        per_device_tx_power=power,
        combined_noise=noisy - grads.mean(axis=0),
        empty_elements=int(empty.sum()),
    )
