"""Per-slot convex solver and independent verification oracles.

The per-slot dispatch problem is solved by a two-block ADMM splitting:
phase-local variables (l_i and the charge variables) form one block,
the substation flow vector f the other, coupled through the per-phase
balance equality with multipliers lambda_i and penalty rho.

For quadratic cost curves every block minimization is closed form
(box-face enumeration, evaluated phase by phase exactly as the
distributed agents do); general convex differentiable curves fall back
to derivative bisection. `oracle_solve` (projected gradient on the
joint problem) and `grid_solve` (refined grid search for tiny
instances) are kept deliberately independent of the ADMM path so the
two can check each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import Nonconverged, NonconvergedBlock
from .model import CostFunction, SystemConfig, SystemState

_TIE_TOL = 1e-12
_INF = float("inf")

DEFAULT_RHO = 5.0
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 5000


@dataclass
class PerSlotProblem:
    """One slot's convex dispatch problem.

    Variables per phase: controllable flow l (unconstrained), the net
    charge u in [u_lo, u_hi] (ideal mode) or the pair
    (u_plus, u_minus) in [0, up_hi] x [0, um_hi] with optionally
    u_plus - u_minus in [diff_lo, diff_hi] (non-ideal mode), and the
    substation flow f in its box. ``weight`` is the drift pressure
    (s - beta)/V on the net charge; zero for the greedy baseline.
    """

    mode: str
    r: np.ndarray
    price: float
    f_lo: np.ndarray
    f_hi: np.ndarray
    loss: CostFunction
    cost_l: tuple
    cost_deg: tuple
    eta_p: np.ndarray
    eta_m: np.ndarray
    weight: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    up_hi: np.ndarray
    um_hi: np.ndarray
    diff_lo: np.ndarray
    diff_hi: np.ndarray

    def __post_init__(self):
        self.n = len(self.r)
        self.all_quadratic = all(fn.is_quadratic for fn in self.cost_l) and all(
            fn is None or fn.is_quadratic for fn in self.cost_deg)
        self._aC = np.array([fn.coefficients[0] if fn.is_quadratic else np.nan
                             for fn in self.cost_l])
        self._bC = np.array([fn.coefficients[1] if fn.is_quadratic else np.nan
                             for fn in self.cost_l])
        self._cC = np.array([fn.coefficients[2] if fn.is_quadratic else np.nan
                             for fn in self.cost_l])
        self._aD = np.array([0.0 if fn is None or not fn.is_quadratic
                             else fn.coefficients[0] for fn in self.cost_deg])
        self._bD = np.array([0.0 if fn is None or not fn.is_quadratic
                             else fn.coefficients[1] for fn in self.cost_deg])
        self._cD = np.array([0.0 if fn is None or not fn.is_quadratic
                             else fn.coefficients[2] for fn in self.cost_deg])
        self.has_storage = np.array([fn is not None for fn in self.cost_deg])

    # -- objective ----------------------------------------------------

    def _cost_l_values(self, l):
        if self.all_quadratic:
            return self._aC * l * l + self._bC * l + self._cC
        return np.array([float(self.cost_l[i].value(l[i])) for i in range(self.n)])

    def imbalance_values(self, f):
        d = f - np.mean(f)
        return self.loss.value(d)

    def objective_ideal(self, l, u, f) -> float:
        """Objective with the net-charge rewrite (includes drift term)."""
        total = float(np.sum(self._cost_l_values(l)))
        total += float(np.sum(self.imbalance_values(f)))
        for i in range(self.n):
            if self.cost_deg[i] is None:
                continue
            ui = float(u[i])
            total += (self.price + self.weight[i]) * ui \
                + float(self.cost_deg[i].value(ui))
        return total

    def objective_nonideal(self, l, up, um, f) -> float:
        total = float(np.sum(self._cost_l_values(l)))
        total += float(np.sum(self.imbalance_values(f)))
        for i in range(self.n):
            if self.cost_deg[i] is None:
                continue
            x, y = float(up[i]), float(um[i])
            total += self.price * (x / self.eta_p[i] - self.eta_m[i] * y)
            total += float(self.cost_deg[i].value(x)) + float(self.cost_deg[i].value(-y))
            total += self.weight[i] * (x - y)
        return total

    def objective_action(self, l, up, um, f) -> float:
        if self.mode == "ideal":
            return self.objective_ideal(l, np.asarray(up) - np.asarray(um), f)
        return self.objective_nonideal(l, up, um, f)

    def storage_flow(self, u_or_up, um=None):
        """Contribution of the charge variables to the balance residual."""
        if self.mode == "ideal":
            return -u_or_up
        return self.eta_m * um - u_or_up / self.eta_p

    def slice(self, i: int) -> "PerSlotProblem":
        """Single-phase view; used by the per-phase agents."""
        pick = slice(i, i + 1)
        return PerSlotProblem(
            mode=self.mode, r=self.r[pick].copy(), price=self.price,
            f_lo=self.f_lo[pick].copy(), f_hi=self.f_hi[pick].copy(),
            loss=self.loss, cost_l=(self.cost_l[i],), cost_deg=(self.cost_deg[i],),
            eta_p=self.eta_p[pick].copy(), eta_m=self.eta_m[pick].copy(),
            weight=self.weight[pick].copy(),
            u_lo=self.u_lo[pick].copy(), u_hi=self.u_hi[pick].copy(),
            up_hi=self.up_hi[pick].copy(), um_hi=self.um_hi[pick].copy(),
            diff_lo=self.diff_lo[pick].copy(), diff_hi=self.diff_hi[pick].copy())


def build_problem(cfg: SystemConfig, state: SystemState, mode: str,
                  weight=None, u_lo=None, u_hi=None,
                  diff_lo=None, diff_hi=None) -> PerSlotProblem:
    """Assemble a :class:`PerSlotProblem` from config plus one slot's state.

    ``weight`` carries the per-phase drift pressure (zeros by default);
    ``u_lo``/``u_hi`` override the ideal-mode net-charge box and
    ``diff_lo``/``diff_hi`` bound u_plus - u_minus (both used by the
    greedy baseline to encode state-dependent charge limits).
    """
    n = cfg.n
    u_max = np.array([ph.storage.u_max if ph.has_storage else 0.0
                      for ph in cfg.phases])
    return PerSlotProblem(
        mode=mode,
        r=np.asarray(state.r, dtype=float),
        price=float(state.p),
        f_lo=np.array([ph.f_min for ph in cfg.phases], dtype=float),
        f_hi=np.array([ph.f_max for ph in cfg.phases], dtype=float),
        loss=cfg.loss,
        cost_l=tuple(ph.cost_l for ph in cfg.phases),
        cost_deg=tuple(ph.cost_deg if ph.has_storage else None for ph in cfg.phases),
        eta_p=np.array([ph.storage.eta_plus if ph.has_storage else 1.0
                        for ph in cfg.phases]),
        eta_m=np.array([ph.storage.eta_minus if ph.has_storage else 1.0
                        for ph in cfg.phases]),
        weight=np.zeros(n) if weight is None else np.asarray(weight, dtype=float),
        u_lo=-u_max if u_lo is None else np.asarray(u_lo, dtype=float),
        u_hi=u_max.copy() if u_hi is None else np.asarray(u_hi, dtype=float),
        up_hi=u_max.copy(),
        um_hi=u_max.copy(),
        diff_lo=np.full(n, -_INF) if diff_lo is None else np.asarray(diff_lo, dtype=float),
        diff_hi=np.full(n, _INF) if diff_hi is None else np.asarray(diff_hi, dtype=float))


# ---------------------------------------------------------------------------
# phase-block minimization (quadratic closed forms, one phase at a time)
# ---------------------------------------------------------------------------

def _pick(cands):
    """First candidate within tolerance of the best objective.

    Candidate order encodes the tie rule (an idle-charge candidate is
    listed first), which keeps the output deterministic when the
    objective has flat directions. Entries are (obj, payload...).
    """
    best = min(c[0] for c in cands)
    tol = _TIE_TOL * (1.0 + abs(best))
    for c in cands:
        if c[0] <= best + tol:
            return c
    return cands[0]


class _QuadKernelIdeal:
    """Closed-form (l, u) block update for quadratic costs."""

    def __init__(self, pr: PerSlotProblem, rho: float):
        self.rho = rho
        self.n = pr.n
        self.phase = []
        for i in range(pr.n):
            aC, bC = float(pr._aC[i]), float(pr._bC[i])
            aD = float(pr._aD[i])
            lin_u = pr.price + float(pr._bD[i]) + float(pr.weight[i])
            q = 2.0 * aC + rho
            a22 = 2.0 * aD + rho
            det = q * a22 - rho * rho
            lo, hi = float(pr.u_lo[i]), float(pr.u_hi[i])
            u0 = min(max(0.0, lo), hi)
            self.phase.append((float(pr.r[i]), aC, bC, aD, lin_u, q, det, lo, hi, u0))

    def block_one(self, i: int, f: float, lam: float):
        rho = self.rho
        r, aC, bC, aD, lin_u, q, det, lo, hi, u0 = self.phase[i]
        g = f + r + lam / rho
        b1 = -bC - rho * g
        cands = []

        def with_u(u):
            l = (b1 + rho * u) / q
            res = l - u + g
            obj = (aC * l * l + bC * l + aD * u * u + lin_u * u
                   + 0.5 * rho * res * res)
            return obj, l, u

        cands.append(with_u(u0))
        if det > 1e-12:
            b2 = -lin_u + rho * g
            u_int = (rho * b1 + q * b2) / det
            if lo - 1e-12 <= u_int <= hi + 1e-12:
                cands.append(with_u(min(max(u_int, lo), hi)))
        if lo != u0:
            cands.append(with_u(lo))
        if hi != u0:
            cands.append(with_u(hi))
        _, l, u = _pick(cands)
        return l, u

    def block_lists(self, f, lam, l_out, u_out):
        for i in range(self.n):
            l_out[i], u_out[i] = self.block_one(i, f[i], lam[i])


def _min_quad_1d(alpha, beta, lo, hi):
    """Argmin of alpha*t^2 + beta*t over [lo, hi]; None if empty.

    Degenerate curvature falls back to the slope sign; a flat segment
    prefers the point closest to zero.
    """
    if lo > hi + 1e-15:
        return None
    if alpha > 1e-14:
        return min(max(-beta / (2.0 * alpha), lo), hi)
    if abs(beta) <= 1e-14:
        return min(max(0.0, lo), hi)
    return lo if beta > 0 else hi


class _QuadKernelNonideal:
    """Closed-form (l, u_plus, u_minus) block update for quadratic costs.

    The controllable flow is eliminated analytically
    (phi(c) = min_l [aC l^2 + bC l + rho/2 (l + c)^2] is quadratic in
    the balance shift c), leaving a 2-D quadratic in
    (u_plus, u_minus) minimized over the box intersected with the
    net-charge band by face enumeration.
    """

    def __init__(self, pr: PerSlotProblem, rho: float):
        self.rho = rho
        self.n = pr.n
        self.phase = []
        for i in range(pr.n):
            aC, bC = float(pr._aC[i]), float(pr._bC[i])
            aD, bD = float(pr._aD[i]), float(pr._bD[i])
            ep, em = float(pr.eta_p[i]), float(pr.eta_m[i])
            w = float(pr.weight[i])
            q = 2.0 * aC + rho
            big_a = rho * aC / q
            big_b = -rho * bC / q
            hxx = big_a / (ep * ep) + aD
            hyy = big_a * em * em + aD
            hxy = -2.0 * big_a * em / ep
            det = 4.0 * hxx * hyy - hxy * hxy
            self.phase.append((
                float(pr.r[i]), bC, q, big_a, big_b, hxx, hyy, hxy, det,
                ep, em, pr.price / ep + bD + w, -pr.price * em - bD - w,
                float(pr.up_hi[i]), float(pr.um_hi[i]),
                float(pr.diff_lo[i]), float(pr.diff_hi[i])))

    def block_one(self, i: int, f: float, lam: float):
        rho = self.rho
        (r, bC, q, big_a, big_b, hxx, hyy, hxy, det, ep, em,
         lin_x0, lin_y0, xp, ym, dlo, dhi) = self.phase[i]
        g = f + r + lam / rho
        g2 = 2.0 * big_a * g + big_b
        hx = -g2 / ep + lin_x0
        hy = g2 * em + lin_y0

        cands = []

        def h_at(x, y):
            return (hxx * x * x + hxy * x * y + hyy * y * y + hx * x + hy * y)

        def push(x, y):
            if x is None or y is None:
                return
            if not (-1e-12 <= x <= xp + 1e-12 and -1e-12 <= y <= ym + 1e-12):
                return
            d = x - y
            if not (dlo - 1e-12 <= d <= dhi + 1e-12):
                return
            x = min(max(x, 0.0), xp)
            y = min(max(y, 0.0), ym)
            cands.append((h_at(x, y), x, y))

        # idle first: encodes the tie rule
        push(0.0, 0.0)
        if det > 1e-12:
            push((hxy * hy - 2.0 * hyy * hx) / det,
                 (hxy * hx - 2.0 * hxx * hy) / det)
        # box edges, restricted to the band
        y_e = _min_quad_1d(hyy, hy, max(0.0, -dhi), min(ym, -dlo))
        push(0.0, y_e)
        y_e = _min_quad_1d(hyy, hy + hxy * xp, max(0.0, xp - dhi), min(ym, xp - dlo))
        push(xp, y_e)
        x_e = _min_quad_1d(hxx, hx, max(0.0, dlo), min(xp, dhi))
        push(x_e, 0.0)
        x_e = _min_quad_1d(hxx, hx + hxy * ym, max(0.0, dlo + ym), min(xp, dhi + ym))
        push(x_e, ym)
        # active band faces (finite only under greedy state caps)
        for d in (dlo, dhi):
            if not math.isfinite(d):
                continue
            alpha = hxx + hxy + hyy
            beta = hx + hy - hxy * d - 2.0 * hyy * d
            x_f = _min_quad_1d(alpha, beta, max(0.0, d), min(xp, ym + d))
            if x_f is not None:
                push(x_f, x_f - d)

        _, x, y = _pick(cands)
        c_bal = em * y - x / ep + g
        l = -(bC + rho * c_bal) / q
        return l, x, y

    def block_lists(self, f, lam, l_out, x_out, y_out):
        for i in range(self.n):
            l_out[i], x_out[i], y_out[i] = self.block_one(i, f[i], lam[i])


# -- general convex curves (bisection fallback) -----------------------------

def _bisect_increasing(fun, lo, hi, tol=1e-12, max_iter=200):
    a, b = lo, hi
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        if fun(m) < 0.0:
            a = m
        else:
            b = m
        if b - a <= tol * (1.0 + abs(a) + abs(b)):
            break
    return 0.5 * (a + b)


def _solve_l(cost_l, rho, c, tol=1e-12):
    """Root of C'(l) + rho*(l + c) = 0 by bracket expansion and bisection."""
    def psi(l):
        return float(cost_l.derivative(l)) + rho * (l + c)
    radius = 1.0 + abs(c)
    lo, hi = -c - radius, -c + radius
    for _ in range(200):
        if psi(lo) < 0.0:
            break
        radius *= 2.0
        lo = -c - radius
    for _ in range(200):
        if psi(hi) > 0.0:
            break
        radius *= 2.0
        hi = -c + radius
    return _bisect_increasing(psi, lo, hi, tol)


class _GeneralKernelIdeal:
    """Coordinate descent over (l, u) for non-quadratic curves."""

    def __init__(self, pr: PerSlotProblem, rho: float,
                 tol: float = 1e-9, max_sweeps: int = 500):
        self.pr = pr
        self.rho = rho
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.n = pr.n

    def block_one(self, i: int, f: float, lam: float):
        pr, rho = self.pr, self.rho
        cost_l, cost_d = pr.cost_l[i], pr.cost_deg[i]
        lo, hi = float(pr.u_lo[i]), float(pr.u_hi[i])
        w, gi = float(pr.weight[i]), f + float(pr.r[i]) + lam / rho
        u = 0.0
        l = _solve_l(cost_l, rho, gi - u)
        for _ in range(self.max_sweeps):
            def du(uu):
                dd = float(cost_d.derivative(uu)) if cost_d is not None else 0.0
                return pr.price + dd + w - rho * (l - uu + gi)
            if hi - lo <= 0.0:
                u_new = lo
            elif du(lo) >= 0.0:
                u_new = lo
            elif du(hi) <= 0.0:
                u_new = hi
            else:
                u_new = _bisect_increasing(du, lo, hi)
            l_new = _solve_l(cost_l, rho, gi - u_new)
            moved = max(abs(u_new - u), abs(l_new - l))
            u, l = u_new, l_new
            if moved <= self.tol:
                return l, u
        raise NonconvergedBlock(f"phase {i}: block sweep cap reached")

    def block_lists(self, f, lam, l_out, u_out):
        for i in range(self.n):
            l_out[i], u_out[i] = self.block_one(i, f[i], lam[i])


def _project_band_box(x, y, x_hi, y_hi, dlo, dhi):
    """Euclidean projection onto {0<=x<=x_hi, 0<=y<=y_hi, dlo<=x-y<=dhi}.

    If the box clamp violates a band face, the projection lies on that
    face; project onto the face segment in closed form.
    """
    cx = np.clip(x, 0.0, x_hi)
    cy = np.clip(y, 0.0, y_hi)
    over = cx - cy > dhi
    under = cx - cy < dlo
    for mask, d in ((over, dhi), (under, dlo)):
        if not np.any(mask):
            continue
        t = 0.5 * (x + y + d)
        t = np.clip(t, np.maximum(0.0, d), np.minimum(x_hi, y_hi + d))
        cx = np.where(mask, t, cx)
        cy = np.where(mask, t - d, cy)
    return cx, cy


class _GeneralKernelNonideal:
    """Projected gradient over (u_plus, u_minus) with exact inner l.

    The envelope theorem gives the reduced gradient directly from the
    inner minimizer, so general curves need only their derivatives.
    """

    def __init__(self, pr: PerSlotProblem, rho: float,
                 tol: float = 1e-9, max_iter: int = 20000):
        self.pr = pr
        self.rho = rho
        self.tol = tol
        self.max_iter = max_iter
        self.n = pr.n

    def block_one(self, i: int, f: float, lam: float):
        pr, rho = self.pr, self.rho
        cost_l, cost_d = pr.cost_l[i], pr.cost_deg[i]
        ep, em = float(pr.eta_p[i]), float(pr.eta_m[i])
        w, gi = float(pr.weight[i]), f + float(pr.r[i]) + lam / rho
        x_hi, y_hi = float(pr.up_hi[i]), float(pr.um_hi[i])
        dlo, dhi = float(pr.diff_lo[i]), float(pr.diff_hi[i])
        if cost_d is None or (x_hi == 0.0 and y_hi == 0.0):
            return _solve_l(cost_l, rho, gi), 0.0, 0.0

        def inner_l(x, y):
            return _solve_l(cost_l, rho, em * y - x / ep + gi)

        def grad(x, y, l):
            cp = float(cost_l.derivative(l))
            gx = pr.price / ep + float(cost_d.derivative(x)) + w + cp / ep
            gy = -pr.price * em - float(cost_d.derivative(-y)) - w - cp * em
            return gx, gy

        def val(x, y, l):
            res = l + em * y - x / ep + gi
            return (float(cost_l.value(l)) + 0.5 * rho * res * res
                    + pr.price * (x / ep - em * y) + w * (x - y)
                    + float(cost_d.value(x)) + float(cost_d.value(-y)))

        def proj(x, y):
            px, py = _project_band_box(np.array([x]), np.array([y]),
                                       x_hi, y_hi, dlo, dhi)
            return float(px[0]), float(py[0])

        x, y = 0.0, 0.0
        l = inner_l(x, y)
        v = val(x, y, l)
        t = 1.0
        for _ in range(self.max_iter):
            gx, gy = grad(x, y, l)
            px, py = proj(x - gx, y - gy)
            if max(abs(px - x), abs(py - y)) <= self.tol:
                return l, x, y
            for _ in range(60):
                nx, ny = proj(x - t * gx, y - t * gy)
                nl = inner_l(nx, ny)
                nv = val(nx, ny, nl)
                dx, dy = nx - x, ny - y
                if nv <= v + gx * dx + gy * dy + (dx * dx + dy * dy) / (2.0 * t) + 1e-15:
                    break
                t *= 0.5
            x, y, l, v = nx, ny, nl, nv
            t = min(t * 1.3, 1e3)
        raise NonconvergedBlock(f"phase {i}: projected gradient cap reached")

    def block_lists(self, f, lam, l_out, x_out, y_out):
        for i in range(self.n):
            l_out[i], x_out[i], y_out[i] = self.block_one(i, f[i], lam[i])


def _make_kernel(problem: PerSlotProblem, rho: float):
    if problem.mode == "ideal":
        return (_QuadKernelIdeal(problem, rho) if problem.all_quadratic
                else _GeneralKernelIdeal(problem, rho))
    return (_QuadKernelNonideal(problem, rho) if problem.all_quadratic
            else _GeneralKernelNonideal(problem, rho))


def phase_block_update(problem: PerSlotProblem, f, lam, rho):
    """Minimize every phase block given the current flow and multipliers.

    Returns (l, u) in ideal mode or (l, u_plus, u_minus) in non-ideal
    mode, exactly for quadratic curves and to first-order tolerance
    1e-9 otherwise.
    """
    kernel = _make_kernel(problem, rho)
    n = problem.n
    f = [float(v) for v in f]
    lam = [float(v) for v in lam]
    l = [0.0] * n
    if problem.mode == "ideal":
        u = [0.0] * n
        kernel.block_lists(f, lam, l, u)
        return np.array(l), np.array(u)
    x = [0.0] * n
    y = [0.0] * n
    kernel.block_lists(f, lam, l, x, y)
    return np.array(l), np.array(x), np.array(y)


# ---------------------------------------------------------------------------
# flow update
# ---------------------------------------------------------------------------

def _flow_objective(loss, f, m, rho):
    d = f - np.mean(f)
    return float(np.sum(loss.value(d)) + 0.5 * rho * np.sum((f + m) ** 2))


def _flow_gradient(loss, f, m, rho):
    d = f - np.mean(f)
    gF = loss.derivative(d)
    return gF - np.mean(gF) + rho * (f + m)


def _flow_pgd(loss, f_lo, f_hi, m, rho, f0, tol=1e-8, max_iter=10000):
    f = np.clip(f0, f_lo, f_hi)
    v = _flow_objective(loss, f, m, rho)
    t = 1.0 / rho
    for _ in range(max_iter):
        grad = _flow_gradient(loss, f, m, rho)
        mapping = f - np.clip(f - grad, f_lo, f_hi)
        if np.max(np.abs(mapping)) <= tol:
            return f
        for _ in range(60):
            f_new = np.clip(f - t * grad, f_lo, f_hi)
            step = f_new - f
            v_new = _flow_objective(loss, f_new, m, rho)
            if v_new <= v + grad @ step + (step @ step) / (2.0 * t) + 1e-15:
                break
            t *= 0.5
        f, v = f_new, v_new
        t = min(t * 1.3, 1e3)
    raise Nonconverged("flow update did not reach gradient-mapping tolerance",
                       iterations=max_iter)


def _flow_update_lists(problem: PerSlotProblem, m, rho):
    """Scalar fast path for quadratic loss; falls back to projected
    gradient when a box face is active or the loss is not quadratic.

    Quadratic loss: with P the centering projection, the stationarity
    condition (2*kappa*P + rho*I) f = -rho*m separates into the mean
    (unpenalized by imbalance) and the centered part, giving the closed
    form below. The linear loss coefficient cancels because centered
    deviations sum to zero.
    """
    n = len(m)
    if problem.loss.is_quadratic:
        kappa = problem.loss.coefficients[0]
        m_bar = 0.0
        for v in m:
            m_bar += v
        m_bar /= n
        scale = rho / (2.0 * kappa + rho)
        f = [0.0] * n
        clipped = False
        for i in range(n):
            fi = -scale * (m[i] - m_bar) - m_bar
            lo, hi = problem.f_lo[i], problem.f_hi[i]
            if fi < lo or fi > hi:
                clipped = True
            f[i] = fi
        if not clipped:
            return f
        f0 = np.clip(np.array(f), problem.f_lo, problem.f_hi)
        out = _flow_pgd(problem.loss, problem.f_lo, problem.f_hi,
                        np.asarray(m, dtype=float), rho, f0)
        return [float(v) for v in out]
    out = _flow_pgd(problem.loss, problem.f_lo, problem.f_hi,
                    np.asarray(m, dtype=float), rho,
                    np.clip(-np.asarray(m, dtype=float), problem.f_lo, problem.f_hi))
    return [float(v) for v in out]


def flow_update(problem: PerSlotProblem, m, rho):
    """Minimize the imbalance-plus-coupling cost over the flow box."""
    return np.array(_flow_update_lists(problem, [float(v) for v in m], rho))


def dual_update(lam, rho, balance_residual):
    """lambda <- lambda + rho * residual."""
    return lam + rho * balance_residual


# ---------------------------------------------------------------------------
# ADMM driver
# ---------------------------------------------------------------------------

@dataclass
class TracePoint:
    k: int
    objective: float
    primal_residual: float
    dual_residual: float


@dataclass
class SolveResult:
    l: np.ndarray
    u_plus: np.ndarray
    u_minus: np.ndarray
    f: np.ndarray
    lam: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    converged: bool
    trace: Optional[list] = None

    @property
    def u_net(self):
        return self.u_plus - self.u_minus


def _trace_objective(problem, u_or_up, um, f):
    """P3-style objective of the balance-restored iterate.

    Restoring balance through l (which is unconstrained) yields a
    feasible point, so the traced objective never undershoots the
    optimum.
    """
    u_arr = np.asarray(u_or_up, dtype=float)
    f_arr = np.asarray(f, dtype=float)
    if problem.mode == "ideal":
        l_feas = -(f_arr + problem.r - u_arr)
        return problem.objective_ideal(l_feas, u_arr, f_arr)
    um_arr = np.asarray(um, dtype=float)
    s_flow = problem.eta_m * um_arr - u_arr / problem.eta_p
    l_feas = -(f_arr + problem.r + s_flow)
    return problem.objective_nonideal(l_feas, u_arr, um_arr, f_arr)


def solve(problem: PerSlotProblem, rho: float = DEFAULT_RHO,
          tol_primal: float = DEFAULT_TOL, tol_dual: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER, init: Optional[SolveResult] = None,
          trace: bool = False, halt_on_convergence: bool = True) -> SolveResult:
    """Run the ADMM iteration to the residual tolerances.

    Deterministic given (problem, rho, tolerances): all primal and dual
    variables start at zero unless ``init`` supplies a warm start from
    a previous slot (which changes iteration counts, not fixed points).
    With ``halt_on_convergence=False`` the loop always runs to
    ``max_iter`` and never raises; used for convergence traces.
    """
    n = problem.n
    ideal = problem.mode == "ideal"
    if init is None:
        f = [0.0] * n
        lam = [0.0] * n
    else:
        f = [float(v) for v in init.f]
        lam = [float(v) for v in init.lam]

    kernel = _make_kernel(problem, rho)
    r = [float(v) for v in problem.r]
    eta_p = [float(v) for v in problem.eta_p]
    eta_m = [float(v) for v in problem.eta_m]

    tr = [] if trace else None
    l = [0.0] * n
    u = [0.0] * n
    x = [0.0] * n
    y = [0.0] * n
    m = [0.0] * n
    primal = dual = _INF
    converged = False
    iters = 0
    for k in range(1, max_iter + 1):
        if ideal:
            kernel.block_lists(f, lam, l, u)
            for i in range(n):
                m[i] = r[i] + l[i] - u[i] + lam[i] / rho
        else:
            kernel.block_lists(f, lam, l, x, y)
            for i in range(n):
                m[i] = (r[i] + l[i] + eta_m[i] * y[i] - x[i] / eta_p[i]
                        + lam[i] / rho)
        f_new = _flow_update_lists(problem, m, rho)
        primal = 0.0
        dual = 0.0
        for i in range(n):
            res_i = f_new[i] + m[i] - lam[i] / rho
            lam[i] = lam[i] + rho * res_i
            a = abs(res_i)
            if a > primal:
                primal = a
            a = rho * abs(f_new[i] - f[i])
            if a > dual:
                dual = a
        f = f_new
        iters = k
        if trace:
            tr.append(TracePoint(k, _trace_objective(problem, u if ideal else x,
                                                     y, f),
                                 primal, dual))
        if halt_on_convergence and primal <= tol_primal and dual <= tol_dual:
            converged = True
            break
    else:
        if halt_on_convergence:
            raise Nonconverged(
                f"ADMM hit max_iter={max_iter} (primal {primal:.3e}, dual {dual:.3e})",
                primal_residual=primal, dual_residual=dual, iterations=max_iter)
    if not halt_on_convergence:
        converged = primal <= tol_primal and dual <= tol_dual
    if ideal:
        up = np.array([max(v, 0.0) for v in u])
        um = np.array([max(-v, 0.0) for v in u])
    else:
        up = np.array(x)
        um = np.array(y)
    l_arr = np.array(l)
    f_arr = np.array(f)
    obj = problem.objective_action(l_arr, up, um, f_arr)
    return SolveResult(l=l_arr, u_plus=up, u_minus=um, f=f_arr,
                       lam=np.array(lam), iterations=iters,
                       primal_residual=primal, dual_residual=dual,
                       objective=obj, converged=converged, trace=tr)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    objective: float
    l: np.ndarray
    u_plus: np.ndarray
    u_minus: np.ndarray
    f: np.ndarray
    mapping_norm: float
    iterations: int


def _deg_value(problem, i, x):
    fn = problem.cost_deg[i]
    return 0.0 if fn is None else float(fn.value(x))


def _deg_deriv(problem, i, x):
    fn = problem.cost_deg[i]
    return 0.0 if fn is None else float(fn.derivative(x))


def oracle_solve(problem: PerSlotProblem, tol: float = 1e-10,
                 max_iter: int = 200000) -> OracleResult:
    """Projected gradient descent on the joint problem, l eliminated.

    Independent of the ADMM path: the balance equality removes l, the
    remaining variables are projected onto their boxes (plus the
    net-charge band in non-ideal mode), and Armijo backtracking keeps
    the steps safe. Runs until the unit-step gradient mapping falls
    below ``tol`` or the iteration cap is reached. Intended for small
    instances (N <= 4).
    """
    pr = problem
    n = pr.n
    ideal = pr.mode == "ideal"

    dvals = np.arange(n)

    def cost_l_vals(l):
        if pr.all_quadratic:
            return pr._aC * l * l + pr._bC * l + pr._cC
        return np.array([float(pr.cost_l[i].value(l[i])) for i in dvals])

    def cost_l_derivs(l):
        if pr.all_quadratic:
            return 2.0 * pr._aC * l + pr._bC
        return np.array([float(pr.cost_l[i].derivative(l[i])) for i in dvals])

    def deg_vals(x):
        if pr.all_quadratic:
            # constant term applies only where a degradation curve exists
            return pr._aD * x * x + pr._bD * x + np.where(pr.has_storage, pr._cD, 0.0)
        return np.array([_deg_value(pr, i, x[i]) for i in dvals])

    def deg_derivs(x):
        if pr.all_quadratic:
            return 2.0 * pr._aD * x + pr._bD
        return np.array([_deg_deriv(pr, i, x[i]) for i in dvals])

    if ideal:
        def unpack(z):
            return z[:n], None, z[n:]

        def project(z):
            u, _, f = unpack(z)
            return np.concatenate([np.clip(u, pr.u_lo, pr.u_hi),
                                   np.clip(f, pr.f_lo, pr.f_hi)])

        def value(z):
            u, _, f = unpack(z)
            l = u - f - pr.r
            d = f - np.mean(f)
            return float(np.sum(cost_l_vals(l)) + np.sum(pr.loss.value(d))
                         + np.sum((pr.price + pr.weight) * u + deg_vals(u)))

        def gradient(z):
            u, _, f = unpack(z)
            l = u - f - pr.r
            cp = cost_l_derivs(l)
            d = f - np.mean(f)
            gF = pr.loss.derivative(d)
            g_u = cp + pr.price + pr.weight + deg_derivs(u)
            g_f = -cp + gF - np.mean(gF)
            return np.concatenate([g_u, g_f])

        z = project(np.zeros(2 * n))
    else:
        def unpack(z):
            return z[:n], z[n:2 * n], z[2 * n:]

        def project(z):
            x, y, f = unpack(z)
            px, py = _project_band_box(x, y, pr.up_hi, pr.um_hi,
                                       pr.diff_lo, pr.diff_hi)
            return np.concatenate([px, py, np.clip(f, pr.f_lo, pr.f_hi)])

        def value(z):
            x, y, f = unpack(z)
            l = x / pr.eta_p - pr.eta_m * y - f - pr.r
            d = f - np.mean(f)
            return float(np.sum(cost_l_vals(l)) + np.sum(pr.loss.value(d))
                         + np.sum(pr.price * (x / pr.eta_p - pr.eta_m * y)
                                  + deg_vals(x) + deg_vals(-y)
                                  + pr.weight * (x - y)))

        def gradient(z):
            x, y, f = unpack(z)
            l = x / pr.eta_p - pr.eta_m * y - f - pr.r
            cp = cost_l_derivs(l)
            d = f - np.mean(f)
            gF = pr.loss.derivative(d)
            g_x = cp / pr.eta_p + pr.price / pr.eta_p + deg_derivs(x) + pr.weight
            g_y = -pr.eta_m * cp - pr.price * pr.eta_m - deg_derivs(-y) - pr.weight
            g_f = -cp + gF - np.mean(gF)
            return np.concatenate([g_x, g_y, g_f])

        z = project(np.zeros(3 * n))

    v = value(z)
    t = 1.0
    mapping_norm = _INF
    k = 0
    for k in range(1, max_iter + 1):
        g = gradient(z)
        mapping = z - project(z - g)
        mapping_norm = float(np.max(np.abs(mapping)))
        if mapping_norm <= tol:
            break
        for _ in range(60):
            z_new = project(z - t * g)
            step = z_new - z
            v_new = value(z_new)
            if v_new <= v + g @ step + (step @ step) / (2.0 * t) + 1e-15:
                break
            t *= 0.5
        z, v = z_new, v_new
        t = min(t * 1.3, 1e3)

    if ideal:
        u, _, f = unpack(z)
        l = u - f - pr.r
        up = np.maximum(u, 0.0)
        um = np.maximum(-u, 0.0)
    else:
        x, y, f = unpack(z)
        l = x / pr.eta_p - pr.eta_m * y - f - pr.r
        up, um = x, y
    return OracleResult(objective=v, l=l, u_plus=up, u_minus=um, f=f,
                        mapping_norm=mapping_norm, iterations=k)


def grid_minimize(fun, lo, hi, resolution=1e-3, points=13, margin=2.0,
                  max_rounds=80):
    """Refined grid search: repeatedly zoom a dense grid onto the incumbent.

    ``fun`` must accept one flat array per dimension and return the
    objective for each sample. Dimensions with ``lo == hi`` stay fixed.
    Refinement stops once every active dimension's spacing is at or
    below ``resolution``; reliable for the convex objectives it is used
    on, where the minimizer cannot escape the sampled neighborhood.
    """
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    lo0, hi0 = lo.copy(), hi.copy()
    active = hi0 > lo0
    best_pt = 0.5 * (lo + hi)
    best_val = _INF
    for _ in range(max_rounds):
        axes = [np.linspace(lo[i], hi[i], points) if active[i] else np.array([lo[i]])
                for i in range(len(lo))]
        mesh = np.meshgrid(*axes, indexing="ij")
        cols = [g.ravel() for g in mesh]
        vals = np.asarray(fun(*cols))
        j = int(np.argmin(vals))
        best_pt = np.array([c[j] for c in cols])
        best_val = float(vals[j])
        spacing = np.where(active, (hi - lo) / (points - 1), 0.0)
        if float(np.max(spacing)) <= resolution:
            break
        half = margin * spacing
        lo = np.where(active, np.clip(best_pt - half, lo0, hi0), lo)
        hi = np.where(active, np.clip(best_pt + half, lo0, hi0), hi)
    return best_pt, best_val


def grid_solve(problem: PerSlotProblem, resolution=1e-3, points=13):
    """Second-opinion solve by refined grid search (tiny instances only).

    Grids the charge variables and flows, eliminates l through balance,
    and returns (point, objective). Dimensionality grows fast; use with
    N == 2.
    """
    pr = problem
    n = pr.n
    ideal = pr.mode == "ideal"
    if ideal:
        lo = np.concatenate([pr.u_lo, pr.f_lo])
        hi = np.concatenate([pr.u_hi, pr.f_hi])

        def fun(*cols):
            m = len(cols[0])
            u = np.stack(cols[:n])
            f = np.stack(cols[n:])
            l = u - f - pr.r[:, None]
            total = np.zeros(m)
            for i in range(n):
                total += np.asarray(pr.cost_l[i].value(l[i]), dtype=float)
                if pr.cost_deg[i] is not None:
                    total += (pr.price + pr.weight[i]) * u[i]
                    total += np.asarray(pr.cost_deg[i].value(u[i]), dtype=float)
            d = f - np.mean(f, axis=0)
            total += np.sum(np.asarray(pr.loss.value(d), dtype=float), axis=0)
            return total
    else:
        lo = np.concatenate([np.zeros(n), np.zeros(n), pr.f_lo])
        hi = np.concatenate([pr.up_hi, pr.um_hi, pr.f_hi])

        def fun(*cols):
            m = len(cols[0])
            x = np.stack(cols[:n])
            y = np.stack(cols[n:2 * n])
            f = np.stack(cols[2 * n:])
            l = x / pr.eta_p[:, None] - pr.eta_m[:, None] * y - f - pr.r[:, None]
            total = np.zeros(m)
            for i in range(n):
                total += np.asarray(pr.cost_l[i].value(l[i]), dtype=float)
                if pr.cost_deg[i] is not None:
                    total += pr.price * (x[i] / pr.eta_p[i] - pr.eta_m[i] * y[i])
                    total += np.asarray(pr.cost_deg[i].value(x[i]), dtype=float)
                    total += np.asarray(pr.cost_deg[i].value(-y[i]), dtype=float)
                    total += pr.weight[i] * (x[i] - y[i])
            bad = ((x - y) > pr.diff_hi[:, None] + 1e-12) | \
                  ((x - y) < pr.diff_lo[:, None] - 1e-12)
            total = np.where(np.any(bad, axis=0), _INF, total)
            d = f - np.mean(f, axis=0)
            total += np.sum(np.asarray(pr.loss.value(d), dtype=float), axis=0)
            return total

    return grid_minimize(fun, lo, hi, resolution=resolution, points=points)
