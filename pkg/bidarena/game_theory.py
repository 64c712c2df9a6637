"""Numerical checks of the equilibrium results behind the auction games.

Three instance types are covered: the backoff game and its exact potential,
the two-bidder second-price auction with a losing cost and the shape of the
best response, and the fairness-constrained allocation that the equilibrium
rule reaches.
"""

from __future__ import annotations
from typing import Any, Callable, Mapping, Sequence

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class InfeasibleInstanceError(ValueError):
    """The requested fairness ratio cannot be reached on this instance."""


class EmptyEventError(ValueError):
    """A conditional expectation was asked over an empty event."""


# ---- backoff game ----


@dataclass(frozen=True)
class PotentialGameInstance:
    """Players x commodities backoff game sharing one capacity."""

    backoff_costs: np.ndarray  # q, (players, commodities)
    requirements: np.ndarray  # omega, (players, commodities)
    capacity: float
    weight: float

    def __post_init__(self) -> None:
        q = np.asarray(self.backoff_costs, dtype=float)
        w = np.asarray(self.requirements, dtype=float)
        if q.ndim != 2 or q.shape != w.shape:
            raise ValueError(f"q {q.shape} and omega {w.shape} must be matching matrices")
        if self.capacity <= 0:
            raise ValueError("capacity must be > 0")
        object.__setattr__(self, "backoff_costs", q)
        object.__setattr__(self, "requirements", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.backoff_costs.shape  # type: ignore[return-value]

    @classmethod
    def random(
        cls, rng: np.random.Generator, players: int = 3, commodities: int = 2
    ) -> "PotentialGameInstance":
        return cls(
            backoff_costs=rng.uniform(0.0, 2.0, size=(players, commodities)),
            requirements=rng.uniform(0.1, 1.0, size=(players, commodities)),
            capacity=float(rng.uniform(1.0, 5.0)),
            weight=float(rng.uniform(0.5, 5.0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "potential",
            "backoff_costs": self.backoff_costs.tolist(),
            "requirements": self.requirements.tolist(),
            "capacity": self.capacity,
            "weight": self.weight,
        }


def _profile(alpha: np.ndarray, inst: PotentialGameInstance) -> np.ndarray:
    a = np.asarray(alpha)
    if a.shape != inst.shape:
        raise ValueError(f"profile shape {a.shape} does not match instance {inst.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("profile entries must be 0 or 1")
    return a.astype(float)


def _shared_term(a: np.ndarray, inst: PotentialGameInstance) -> float:
    load = float(np.sum(a * inst.requirements))
    return inst.weight * (1.0 - load / inst.capacity)


def player_utility(i: int, alpha: np.ndarray, inst: PotentialGameInstance) -> float:
    a = _profile(alpha, inst)
    q = inst.backoff_costs[i]
    return float(q.sum() - np.dot(a[i], q)) + _shared_term(a, inst)


def potential_value(alpha: np.ndarray, inst: PotentialGameInstance) -> float:
    a = _profile(alpha, inst)
    q = inst.backoff_costs
    return float(q.sum() - np.sum(a * q)) + _shared_term(a, inst)


def verify_exact_potential(
    inst: PotentialGameInstance, trials: int, rng: np.random.Generator
) -> float:
    """Largest gap between a unilateral utility change and the potential change."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    players, commodities = inst.shape
    worst = 0.0
    for _ in range(trials):
        alpha = rng.integers(0, 2, size=(players, commodities))
        i = int(rng.integers(players))
        other = alpha.copy()
        other[i] = rng.integers(0, 2, size=commodities)
        du = player_utility(i, alpha, inst) - player_utility(i, other, inst)
        dphi = potential_value(alpha, inst) - potential_value(other, inst)
        worst = max(worst, abs(du - dphi))
    return worst


# ---- second-price auction with a losing cost ----


def spa_payoff(x: int, v: float, p: float, c: float) -> float:
    if x not in (0, 1):
        raise ValueError(f"win indicator must be 0 or 1, got {x!r}")
    return x * (v - p) - (1 - x) * c


@dataclass(frozen=True)
class SPAInstance:
    """Two bidders; bidder 1 plays a linear strategy from ``a1 = f1(l1)`` to ``b1 = f1(m1)``.

    Valuations are uniform on their supports; expectations over bidder 1
    use a midpoint rule with ``nodes`` points.
    """

    supports: tuple[tuple[float, float], tuple[float, float]]
    budgets: tuple[float, float]
    losing_costs: tuple[float, float]
    anchors: tuple[float, float]
    nodes: int = 2001

    def __post_init__(self) -> None:
        supports = tuple(tuple(float(x) for x in s) for s in self.supports)
        object.__setattr__(self, "supports", supports)
        for name in ("budgets", "losing_costs", "anchors"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        for low, high in supports:
            if not low < high:
                raise ValueError("each valuation support needs l < m")
        a1, b1 = self.anchors
        if not a1 < b1:
            raise ValueError("bidder 1's strategy must be increasing (a1 < b1)")
        if b1 > self.budgets[0]:
            raise ValueError("bidder 1 cannot bid above its budget")
        if min(self.losing_costs) < 0:
            raise ValueError("losing costs must be >= 0")
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")

    def f1(self, v1: np.ndarray | float) -> np.ndarray:
        (l1, m1), _ = self.supports
        a1, b1 = self.anchors
        return a1 + (b1 - a1) * (np.asarray(v1, dtype=float) - l1) / (m1 - l1)

    def opponent_bids(self) -> np.ndarray:
        (l1, m1), _ = self.supports
        edges = np.linspace(l1, m1, self.nodes + 1)
        return self.f1(0.5 * (edges[:-1] + edges[1:]))

    def with_costs(self, c1: float, c2: float) -> "SPAInstance":
        return SPAInstance(self.supports, self.budgets, (c1, c2), self.anchors, self.nodes)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "spa", **asdict(self)}


def expected_bid_utility(
    v2: float, bids: np.ndarray, opponent_bids: np.ndarray, c2: float
) -> np.ndarray:
    """Expected second-price utility of each bid against equally likely opponent bids.

    Ties are split evenly between winning and losing.
    """
    b = np.asarray(bids, dtype=float)[:, None]
    opp = np.asarray(opponent_bids, dtype=float)[None, :]
    tie = np.isclose(b, opp, rtol=0.0, atol=1e-12)
    win = (b > opp) & ~tie
    lose = ~(win | tie)
    u = np.where(win, v2 - opp, 0.0)
    u = u + np.where(tie, 0.5 * (v2 - opp) - 0.5 * c2, 0.0)
    u = u - np.where(lose, c2, 0.0)
    return u.mean(axis=1)


@dataclass(frozen=True)
class BestResponseCurve:
    valuations: np.ndarray
    bids: np.ndarray
    bid_step: float


def best_response_curve(
    inst: SPAInstance, v2_grid: Sequence[float], bid_grid: Sequence[float]
) -> BestResponseCurve:
    v2 = np.sort(np.asarray(v2_grid, dtype=float))
    bids = np.sort(np.asarray(bid_grid, dtype=float))
    if v2.size == 0 or bids.size == 0:
        raise ValueError("valuation and bid grids must be nonempty")
    bids = bids[bids <= inst.budgets[1] + 1e-12]
    if bids.size == 0:
        raise ValueError("no bid on the grid respects bidder 2's budget")
    opp = inst.opponent_bids()
    c2 = inst.losing_costs[1]
    best = np.empty_like(v2)
    for n, value in enumerate(v2):
        u = expected_bid_utility(value, bids, opp, c2)
        # lowest bid among the maximisers
        best[n] = bids[int(np.flatnonzero(u >= u.max() - 1e-12)[0])]
    step = float(np.min(np.diff(bids))) if bids.size > 1 else 0.0
    return BestResponseCurve(v2, best, step)


@dataclass(frozen=True)
class PiecewiseLinearReport:
    theta1: float
    theta2: float
    slope: float | None  # j2
    intercept: float | None  # d2
    max_residual: float
    anchor_error: float
    lower_ok: bool
    upper_ok: bool

    @property
    def middle_empty(self) -> bool:
        return self.slope is None

    def passed(self, tol: float) -> bool:
        return (
            self.lower_ok
            and self.upper_ok
            and self.max_residual <= tol
            and self.anchor_error <= tol
        )


def check_piecewise_linear_form(
    curve: BestResponseCurve, a1: float, b1: float, tol: float
) -> PiecewiseLinearReport:
    v, b = curve.valuations, curve.bids
    middle = (b > a1) & (b < b1)
    if not middle.any():
        top = float(v.max())
        return PiecewiseLinearReport(
            theta1=top,
            theta2=top,
            slope=None,
            intercept=None,
            max_residual=0.0,
            anchor_error=0.0,
            lower_ok=bool(np.all((b <= a1 + tol) | (b >= b1 - tol))),
            upper_ok=True,
        )
    idx = np.flatnonzero(middle)
    first, last = int(idx[0]), int(idx[-1])
    if idx.size >= 2:
        slope, intercept = np.polyfit(v[idx], b[idx], 1)
    else:
        slope, intercept = 0.0, float(b[first])
    residual = float(np.max(np.abs(b[idx] - (slope * v[idx] + intercept))))
    theta1 = 0.5 * (v[first - 1] + v[first]) if first > 0 else float(v[first])
    theta2 = 0.5 * (v[last] + v[last + 1]) if last + 1 < v.size else float(v[last])
    anchor_error = max(
        abs(slope * theta1 + intercept - a1) if first > 0 else 0.0,
        abs(slope * theta2 + intercept - b1) if last + 1 < v.size else 0.0,
    )
    return PiecewiseLinearReport(
        theta1=float(theta1),
        theta2=float(theta2),
        slope=float(slope),
        intercept=float(intercept),
        max_residual=residual,
        anchor_error=float(anchor_error),
        lower_ok=bool(np.all(b[:first] <= a1 + tol)),
        upper_ok=bool(np.all(b[last + 1:] >= b1 - tol)),
    )


# ---- fairness-constrained allocation ----

AllocationRule = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ParetoInstance:
    """Linear valuations ``v = g * omega + k`` and equilibrium response lines.

    Resource requirements are drawn uniformly from the box
    ``[omega_low, omega_high]``.
    """

    valuation: tuple[float, float, float, float]  # g1, k1, g2, k2
    response: tuple[float, float, float, float]  # j1, d1, j2, d2
    gamma: float
    omega_low: tuple[float, float] = (1.0, 1.0)
    omega_high: tuple[float, float] = (2.0, 2.0)

    def __post_init__(self) -> None:
        for name in ("valuation", "response", "omega_low", "omega_high"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.response[0] <= 0 or self.response[2] <= 0:
            raise ValueError("response slopes j1, j2 must be > 0")
        if any(lo > hi for lo, hi in zip(self.omega_low, self.omega_high)):
            raise ValueError("omega_low must not exceed omega_high")
        if min(self.omega_low) <= 0:
            raise ValueError("resource requirements must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.omega_low, self.omega_high, size=(n, 2))

    def valuations(self, omega: np.ndarray) -> np.ndarray:
        g1, k1, g2, k2 = self.valuation
        return np.column_stack([g1 * omega[:, 0] + k1, g2 * omega[:, 1] + k2])

    def to_dict(self) -> dict[str, Any]:
        return {"type": "pareto", **asdict(self)}


def ne_allocation(v1: float, v2: float, j1: float, d1: float, j2: float, d2: float) -> int:
    return 1 if j1 * v1 + d1 >= j2 * v2 + d2 else 2


def ne_rule(inst: ParetoInstance) -> AllocationRule:
    j1, d1, j2, d2 = inst.response

    def rule(omega: np.ndarray) -> np.ndarray:
        v = inst.valuations(omega)
        return np.where(j1 * v[:, 0] + d1 >= j2 * v[:, 1] + d2, 1, 2)

    return rule


def tilted_rule(lam: float, gamma: float) -> AllocationRule:
    """Player 1 wins iff ``omega1 (1 + lam) >= omega2 (1 - gamma lam)``."""

    def rule(omega: np.ndarray) -> np.ndarray:
        return np.where(omega[:, 0] * (1.0 + lam) >= omega[:, 1] * (1.0 - gamma * lam), 1, 2)

    return rule


def ratio_rule(slope: float) -> AllocationRule:
    def rule(omega: np.ndarray) -> np.ndarray:
        return np.where(omega[:, 0] >= slope * omega[:, 1], 1, 2)

    return rule


def fairness_ratio(rule: AllocationRule, omega: np.ndarray) -> float:
    """``E[omega1 | 1 wins] / E[omega2 | 2 wins]`` over the sample."""
    winners = rule(omega)
    ones, twos = winners == 1, winners == 2
    if not ones.any():
        raise EmptyEventError(f"player 1 never wins in {len(omega)} samples")
    if not twos.any():
        raise EmptyEventError(f"player 2 never wins in {len(omega)} samples")
    return float(omega[ones, 0].mean() / omega[twos, 1].mean())


def allocation_welfare(rule: AllocationRule, omega: np.ndarray) -> float:
    """Expected resource allocated to the winner."""
    winners = rule(omega)
    return float(np.where(winners == 1, omega[:, 0], omega[:, 1]).mean())


def _lambda_range(gamma: float, margin: float = 1e-6) -> tuple[float, float]:
    return -1.0 + margin, 1.0 / gamma - margin


def scan_fairness(
    gamma: float, omega: np.ndarray, points: int = 201
) -> tuple[np.ndarray, np.ndarray]:
    """Achieved ratio over a grid of tilts; empty events give NaN."""
    lo, hi = _lambda_range(gamma)
    lams = np.linspace(lo, hi, points)
    ratios = np.full(points, np.nan)
    for n, lam in enumerate(lams):
        try:
            ratios[n] = fairness_ratio(tilted_rule(lam, gamma), omega)
        except EmptyEventError:
            pass
    return lams, ratios


def _closest_step(gamma: float, omega: np.ndarray) -> tuple[float, float] | None:
    # every tilt splits the sample at some ratio omega1/omega2; try them all
    r = omega[:, 0] / omega[:, 1]
    order = np.argsort(r)
    r, w1, w2 = r[order], omega[order, 0], omega[order, 1]
    n = r.size
    if n < 2:
        return None
    # cut k: the k smallest ratios go to player 2
    k = np.arange(1, n)
    suffix1 = np.cumsum(w1[::-1])[::-1]
    prefix2 = np.cumsum(w2)
    ratios = (suffix1[k] / (n - k)) / (prefix2[k - 1] / k)
    valid = r[k] > r[k - 1]
    if not valid.any():
        return None
    gaps = np.where(valid, np.abs(ratios - gamma), np.inf)
    best = int(np.argmin(gaps))
    s = 0.5 * (r[best] + r[best + 1])
    return (1.0 - s) / (gamma + s), float(ratios[best])


def solve_lambda_star(
    inst: ParetoInstance,
    gamma: float | None = None,
    tol: float = 1e-3,
    *,
    omega: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    samples: int = 20_000,
    scan_points: int = 201,
) -> float:
    """Tilt ``lam`` for which the tilted rule reaches fairness ratio ``gamma``."""
    gamma = inst.gamma if gamma is None else float(gamma)
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if omega is None:
        omega = inst.sample(rng if rng is not None else np.random.default_rng(0), samples)

    lams, ratios = scan_fairness(gamma, omega, scan_points)
    ok = np.flatnonzero(np.isfinite(ratios))
    diff = ratios[ok] - gamma
    bracket = None
    for a, b in zip(ok[:-1], ok[1:]):
        if np.sign(ratios[a] - gamma) != np.sign(ratios[b] - gamma):
            bracket = (float(lams[a]), float(lams[b]))
            break
    if bracket is None:
        if ok.size and np.min(np.abs(diff)) <= tol:
            return float(lams[ok[int(np.argmin(np.abs(diff)))]])
        raise InfeasibleInstanceError(
            f"fairness ratio {gamma} is not bracketed on this instance "
            f"(scanned range {np.nanmin(ratios) if ok.size else 'n/a'}"
            f"..{np.nanmax(ratios) if ok.size else 'n/a'})"
        )

    lo, hi = bracket
    f_lo = fairness_ratio(tilted_rule(lo, gamma), omega) - gamma
    best_lam, best_gap = lo, abs(f_lo)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        try:
            f_mid = fairness_ratio(tilted_rule(mid, gamma), omega) - gamma
        except EmptyEventError:
            break
        if abs(f_mid) < best_gap:
            best_lam, best_gap = mid, abs(f_mid)
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid

    # sample ratios form a staircase; take its closest step
    step = _closest_step(gamma, omega)
    if step is not None and abs(step[1] - gamma) < best_gap:
        best_lam, best_gap = step[0], abs(step[1] - gamma)
    if best_gap > tol:
        raise InfeasibleInstanceError(
            f"closest achievable ratio misses {gamma} by {best_gap:.3g} > {tol}"
        )
    logger.debug("lambda* = %.6f (ratio gap %.2e)", best_lam, best_gap)
    return float(best_lam)


@dataclass(frozen=True)
class WelfareReport:
    a_star_welfare: float
    best_rival_welfare: float | None
    lambda_star: float
    achieved_ratio: float
    rivals: int
    feasible_rivals: int
    scale: float
    slack: float = field(default=1e-6)

    @property
    def passed(self) -> bool:
        if self.feasible_rivals == 0 or self.best_rival_welfare is None:
            return False
        return self.a_star_welfare >= self.best_rival_welfare - self.slack * self.scale


def verify_welfare_optimality(
    inst: ParetoInstance,
    gamma: float | None = None,
    grid: int = 50,
    *,
    tol: float = 1e-3,
    omega: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    samples: int = 20_000,
) -> WelfareReport:
    """Compare the tilted equilibrium rule against every grid threshold rule.

    A rival ``omega1 >= s * omega2`` takes its slope ``s`` from the ratios of
    a ``grid x grid`` lattice over the requirement box; it is feasible when
    its fairness ratio lies within ``tol`` of ``gamma``. The check fails when
    no rival is feasible.
    """
    gamma = inst.gamma if gamma is None else float(gamma)
    if omega is None:
        omega = inst.sample(rng if rng is not None else np.random.default_rng(0), samples)
    lam = solve_lambda_star(inst, gamma, tol, omega=omega)
    a_star = tilted_rule(lam, gamma)
    a_welfare = allocation_welfare(a_star, omega)
    achieved = fairness_ratio(a_star, omega)

    lo, hi = inst.omega_low, inst.omega_high
    g1 = np.linspace(lo[0], hi[0], grid)
    g2 = np.linspace(lo[1], hi[1], grid)
    slopes = np.unique(np.outer(g1, 1.0 / g2))
    best: float | None = None
    feasible = 0
    for s in slopes:
        rule = ratio_rule(float(s))
        try:
            ratio = fairness_ratio(rule, omega)
        except EmptyEventError:
            continue
        if abs(ratio - gamma) <= tol:
            feasible += 1
            w = allocation_welfare(rule, omega)
            best = w if best is None else max(best, w)
    scale = float(np.max(np.abs(omega)))
    return WelfareReport(
        a_star_welfare=a_welfare,
        best_rival_welfare=best,
        lambda_star=lam,
        achieved_ratio=achieved,
        rivals=int(slopes.size),
        feasible_rivals=feasible,
        scale=scale,
    )


# ---- instance documents ----


def instance_from_dict(
    doc: Mapping[str, Any],
) -> PotentialGameInstance | SPAInstance | ParetoInstance:
    data = dict(doc)
    kind = data.pop("type", None)
    try:
        if kind == "potential":
            return PotentialGameInstance(
                backoff_costs=np.asarray(data["backoff_costs"], dtype=float),
                requirements=np.asarray(data["requirements"], dtype=float),
                capacity=float(data["capacity"]),
                weight=float(data["weight"]),
            )
        if kind == "spa":
            return SPAInstance(**data)
        if kind == "pareto":
            return ParetoInstance(**data)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed {kind} instance: {exc}") from exc
    raise ValueError(f"unknown instance type {kind!r}")


def default_instances() -> dict[str, PotentialGameInstance | SPAInstance | ParetoInstance]:
    rng = np.random.default_rng(2024)
    return {
        "potential": PotentialGameInstance.random(rng, players=4, commodities=3),
        "spa": SPAInstance(
            supports=((0.0, 10.0), (0.0, 10.0)),
            budgets=(10.0, 10.0),
            losing_costs=(0.0, 0.5),
            anchors=(2.0, 8.0),
        ),
        "pareto": ParetoInstance(
            valuation=(1.0, 0.0, 1.0, 0.0),
            response=(1.0, 0.0, 1.0, 0.0),
            gamma=1.2,
        ),
    }


def uniform_grid(low: float, high: float, step: float) -> np.ndarray:
    count = int(math.floor((high - low) / step + 1e-9)) + 1
    return np.round(low + step * np.arange(count), 10)
