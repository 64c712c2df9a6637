"""Short-term payoff aggregates and the end-of-episode extrinsic signals."""

from __future__ import annotations
from typing import Iterable, Mapping, Sequence

import math
from dataclasses import dataclass, field

from .config import SignalKind


@dataclass(frozen=True)
class PaymentLedger:
    """Per-bidder broker payments and payoffs over one episode window."""

    payments: Mapping[int, Sequence[float]] = field(default_factory=dict)
    payoffs: Mapping[int, Sequence[float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.payments) != set(self.payoffs):
            raise ValueError("payments and payoffs must cover the same bidders")
        lengths = {len(v) for v in self.payments.values()}
        lengths |= {len(v) for v in self.payoffs.values()}
        if len(lengths) > 1:
            raise ValueError("every bidder needs a window of the same length")
        for bidder_id, seq in self.payments.items():
            if any(p < 0 for p in seq):
                raise ValueError(f"negative payment recorded for bidder {bidder_id}")

    @property
    def bidders(self) -> list[int]:
        return sorted(self.payments)

    @property
    def window(self) -> int:
        for seq in self.payments.values():
            return len(seq)
        return 0

    def payment_totals(self) -> list[float]:
        return [math.fsum(self.payments[i]) for i in self.bidders]


def cumulated_payoff(payoffs: Iterable[float]) -> float:
    values = list(payoffs)
    if not values:
        raise ValueError("cumulated_payoff needs a nonempty window")
    return math.fsum(values)


def jain_index(payment_totals: Sequence[float], num_bidders: int | None = None) -> float:
    """Jain's fairness index of the per-bidder payment totals.

    Equal totals (all-zero included) return exactly 1.0.
    """
    n = len(payment_totals) if num_bidders is None else num_bidders
    if n < 1:
        raise ValueError("jain_index needs at least one bidder")
    if len(payment_totals) != n:
        raise ValueError(f"expected {n} totals, got {len(payment_totals)}")
    if any(s < 0 for s in payment_totals):
        raise ValueError("payment totals must be nonnegative")
    if all(s == payment_totals[0] for s in payment_totals):
        return 1.0
    squares = math.fsum(s * s for s in payment_totals)
    total = math.fsum(payment_totals)
    return (total * total) / (n * squares)


def extrinsic_signal(kind: SignalKind | str, ledger: PaymentLedger, bidder_id: int) -> float:
    kind = SignalKind(kind)
    if kind is SignalKind.PAYOFF:
        return cumulated_payoff(ledger.payoffs[bidder_id])
    # identical for every bidder: carries no private information
    return jain_index(ledger.payment_totals(), len(ledger.bidders))
