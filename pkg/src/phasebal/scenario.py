"""Seeded generation of the exogenous process: flows and prices.

Uncontrollable flows follow a stationary first-order autoregressive
Gaussian process with configurable cross-phase correlation, clamped to
the per-phase bounds. Clamping (rather than rejection) preserves the
temporal and cross-phase correlation of the latent process and keeps
generation reproducible. Prices are uniform on [p_min, p_max],
independent across slots and independent of the flows.

The PRNG is numpy's PCG64 behind ``default_rng``; the algorithm
identifier is carried in the spec so runs reproduce across machines.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidConfig, NonPSDCorrelation
from .model import SystemConfig, SystemState

_SUPPORTED_RNG = "pcg64"


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of the exogenous process for one run."""

    seed: int
    horizon: int
    flow_mean: tuple
    flow_std: tuple
    phase_corr: Optional[tuple] = None  # nested tuple; identity when None
    time_corr: float = 0.0
    rng: str = _SUPPORTED_RNG


def identity_corr(n: int) -> tuple:
    return tuple(tuple(1.0 if i == j else 0.0 for j in range(n)) for i in range(n))


def pair_corr(n: int, pairs, rho: float) -> tuple:
    """Correlation matrix with ``rho`` at the given (i, j) pairs, identity elsewhere."""
    m = np.eye(n)
    for i, j in pairs:
        m[i, j] = m[j, i] = rho
    return tuple(tuple(row) for row in m)


def validate_spec(spec: ScenarioSpec, cfg: SystemConfig) -> ScenarioSpec:
    n = cfg.n
    if spec.rng != _SUPPORTED_RNG:
        raise InvalidConfig(f"unsupported rng {spec.rng!r}; only {_SUPPORTED_RNG!r}")
    if spec.horizon <= 0:
        raise InvalidConfig("horizon must be positive")
    if len(spec.flow_mean) != n or len(spec.flow_std) != n:
        raise InvalidConfig("flow_mean/flow_std length must match the phase count")
    if any(s < 0 for s in spec.flow_std):
        raise InvalidConfig("flow_std entries must be nonnegative")
    if not -1.0 < spec.time_corr < 1.0:
        raise InvalidConfig("time_corr must be in (-1, 1)")
    if spec.phase_corr is not None:
        m = np.asarray(spec.phase_corr, dtype=float)
        if m.shape != (n, n):
            raise InvalidConfig("phase_corr must be N x N")
        if not np.allclose(m, m.T, atol=1e-12):
            raise InvalidConfig("phase_corr must be symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-12):
            raise InvalidConfig("phase_corr must have unit diagonal")
    return spec


def _corr_factor(corr: np.ndarray) -> np.ndarray:
    """Matrix L with L @ L.T == corr; tolerates PSD-singular matrices."""
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(corr)
        if w.min() < -1e-8:
            raise NonPSDCorrelation(
                f"phase correlation matrix has eigenvalue {w.min():.3e} < 0")
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class StateStream:
    """Precomputed sequence of :class:`SystemState`, one per slot.

    Single-owner stateful cursor; create distinct streams (distinct
    seeds) for concurrent runs. ``latent`` holds the pre-clamp flow
    values for diagnostics.
    """

    flows: np.ndarray   # (T, N) clamped
    latent: np.ndarray  # (T, N) pre-clamp
    prices: np.ndarray  # (T,)
    _cursor: int = field(default=0, repr=False)

    @property
    def horizon(self) -> int:
        return self.flows.shape[0]

    def __iter__(self):
        return self

    def __next__(self) -> SystemState:
        if self._cursor >= self.horizon:
            raise StopIteration
        t = self._cursor
        self._cursor += 1
        return SystemState(r=self.flows[t], p=float(self.prices[t]), slot=t)

    def reset(self) -> "StateStream":
        self._cursor = 0
        return self


def new_generator(spec: ScenarioSpec, cfg: SystemConfig) -> StateStream:
    """Generate the full exogenous sequence for ``spec`` against ``cfg``.

    The latent flow process is z_t = rho2*z_{t-1} + sqrt(1-rho2^2)*w_t
    with w_t ~ N(0, Sigma), Sigma built from flow_std and phase_corr,
    started from its stationary distribution so the marginal variance
    is preserved at every slot. Deterministic given the seed.
    """
    validate_spec(spec, cfg)
    n = cfg.n
    t_len = spec.horizon
    corr = np.asarray(spec.phase_corr, dtype=float) if spec.phase_corr is not None \
        else np.eye(n)
    factor = _corr_factor(corr) * np.asarray(spec.flow_std, dtype=float)[:, None]

    rng = np.random.default_rng(spec.seed)
    eps = rng.standard_normal((t_len, n))
    innov = eps @ factor.T
    rho2 = spec.time_corr
    z = np.empty((t_len, n))
    z[0] = innov[0]
    decay = np.sqrt(1.0 - rho2 * rho2)
    for t in range(1, t_len):
        z[t] = rho2 * z[t - 1] + decay * innov[t]
    latent = z + np.asarray(spec.flow_mean, dtype=float)

    r_lo = np.array([ph.r_min for ph in cfg.phases])
    r_hi = np.array([ph.r_max for ph in cfg.phases])
    flows = np.clip(latent, r_lo, r_hi)
    prices = rng.uniform(cfg.p_min, cfg.p_max, t_len)
    return StateStream(flows=flows, latent=latent, prices=prices)


def replay_stream(path, cfg: SystemConfig) -> StateStream:
    """Build a stream from a CSV with columns t, r_1..r_N, p.

    Substitutes recorded states for generation; rows must be in slot
    order and flows within the configured bounds.
    """
    n = cfg.n
    expected = ["t"] + [f"r_{i + 1}" for i in range(n)] + ["p"]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != expected:
            raise InvalidConfig(f"replay CSV header must be {','.join(expected)}")
        rows = [[float(x) for x in row] for row in reader if row]
    flows = np.array([row[1:1 + n] for row in rows])
    prices = np.array([row[1 + n] for row in rows])
    r_lo = np.array([ph.r_min for ph in cfg.phases])
    r_hi = np.array([ph.r_max for ph in cfg.phases])
    if flows.size and ((flows < r_lo - 1e-9).any() or (flows > r_hi + 1e-9).any()):
        raise InvalidConfig("replay flows outside configured [r_min, r_max]")
    if prices.size and ((prices < cfg.p_min - 1e-9).any() or (prices > cfg.p_max + 1e-9).any()):
        raise InvalidConfig("replay prices outside configured [p_min, p_max]")
    return StateStream(flows=flows, latent=flows.copy(), prices=prices)


def with_horizon(spec: ScenarioSpec, horizon: int) -> ScenarioSpec:
    return replace(spec, horizon=horizon)


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, seed=seed)
