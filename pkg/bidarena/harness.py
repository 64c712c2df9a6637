"""Experiment orchestration.

A :class:`Scenario` names a game, a roster of learner kinds, an extrinsic
signal and a seed. :func:`run_scenario` plays its episodes with continuous
learning state and leaves three files in the run directory::

    manifest.json    scenario, run id, completed episodes, library versions
    metrics.jsonl    one MetricsRow per (episode, step, bidder)
    checkpoints.db   agent state after the last completed episode

:func:`aggregate` turns one or more run directories into a :class:`Summary`,
:func:`emit_plots` draws it, and :func:`verify_appendix` runs the
equilibrium checks from :mod:`bidarena.game_theory`.
"""

from __future__ import annotations
from typing import Any, Callable, Iterable, Mapping, Sequence

import dataclasses
import json
import logging
import math
import platform
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import game_theory as gt
from .checkpoint import _BaseCheckpointStore
from .config import (
    AuctionConfig,
    GameKind,
    LearnerConfig,
    SignalKind,
    auction_config,
    learner_config,
    load_config_file,
)
from .engine import EpisodeLog, run_episode
from .fsp import FSPAgent
from .learners import AGENT_KINDS, make_agent
from .rewards import jain_index
from .sqlite import SQLiteCheckpointStore
from .utils import _make_key, spawn_rng, torch_seed

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoints.db"


class ScenarioError(ValueError):
    """Unknown preset, invalid roster or malformed scenario document."""


class EpisodeAborted(RuntimeError):
    """An agent raised inside an episode; the run stopped after logging it."""


class MetricsFormatError(ValueError):
    """Missing or corrupt metrics rows; the message lists file and line numbers."""


# ---- scenarios ----

_GAMES = {"fp": GameKind.FP_REVERSE, "sp": GameKind.SP_FORWARD}
_SIGNALS = {"payoff": SignalKind.PAYOFF, "fairness": SignalKind.FAIRNESS}
_ROSTERS = ("hetero", "dra", "cur", "sht")

DEFAULT_EPISODES = 300

SMOKE_AUCTION = {"episode_length": 20}
SMOKE_LEARNER = {
    "window": 4,
    "channels": 8,
    "feature_dim": 8,
    "sl_hidden": 16,
    "sl_batch": 8,
    "credit_hidden": 8,
    "credit_epochs": 2,
}


def hetero_roster(num_bidders: int) -> tuple[str, ...]:
    return tuple(AGENT_KINDS[i % len(AGENT_KINDS)] for i in range(num_bidders))


def _roster(label: str, num_bidders: int) -> tuple[str, ...]:
    if label == "hetero":
        return hetero_roster(num_bidders)
    return (label.upper(),) * num_bidders


@dataclass(frozen=True)
class Scenario:
    name: str
    roster: tuple[str, ...]
    signal_kind: SignalKind = SignalKind.PAYOFF
    episodes: int = DEFAULT_EPISODES
    seed: int = 0
    auction: AuctionConfig = field(default_factory=AuctionConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)

    def __post_init__(self) -> None:
        roster = tuple(str(kind).upper() for kind in self.roster)
        object.__setattr__(self, "roster", roster)
        try:
            object.__setattr__(self, "signal_kind", SignalKind(self.signal_kind))
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
        unknown = sorted(set(roster) - set(AGENT_KINDS))
        if unknown:
            raise ScenarioError(f"unknown agent kinds in roster: {', '.join(unknown)}")
        if len(roster) != self.auction.num_bidders:
            raise ScenarioError(
                f"roster has {len(roster)} agents but the auction has "
                f"{self.auction.num_bidders} bidders"
            )
        if self.episodes < 1:
            raise ScenarioError("episodes must be >= 1")

    @property
    def game_kind(self) -> GameKind:
        return self.auction.game_kind

    def replace(self, **changes: Any) -> "Scenario":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        auction = asdict(self.auction)
        auction["game_kind"] = self.auction.game_kind.value
        auction["valuation_range"] = list(self.auction.valuation_range)
        learner = asdict(self.learner)
        learner["filter_widths"] = list(self.learner.filter_widths)
        return {
            "name": self.name,
            "game_kind": self.game_kind.value,
            "roster": list(self.roster),
            "extrinsic_signal": self.signal_kind.value,
            "episodes": self.episodes,
            "seed": self.seed,
            "auction": auction,
            "learner": learner,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Scenario":
        known = {
            "name", "game_kind", "roster", "extrinsic_signal", "episodes", "seed", "auction",
            "learner",
        }
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {', '.join(unknown)}")
        auction = dict(doc.get("auction", {}))
        if "game_kind" in doc:
            auction["game_kind"] = doc["game_kind"]
        try:
            return cls(
                name=str(doc.get("name", "custom")),
                roster=tuple(doc["roster"]),
                signal_kind=doc.get("extrinsic_signal", SignalKind.PAYOFF),
                episodes=int(doc.get("episodes", DEFAULT_EPISODES)),
                seed=int(doc.get("seed", 0)),
                auction=auction_config(auction),
                learner=learner_config(doc.get("learner", {})),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario document lacks {exc}") from exc

    @property
    def run_id(self) -> str:
        """Stable id: same scenario and seed give the same id, whatever the episode count."""
        identity = self.to_dict()
        identity.pop("episodes")
        digest = _make_key(json.dumps(identity, sort_keys=True))
        return f"{self.name}-s{self.seed}-{digest[:10]}"


def preset_names() -> list[str]:
    names = [
        f"{game}-{roster}-{signal}"
        for game in _GAMES
        for roster in _ROSTERS
        for signal in _SIGNALS
    ]
    return names + ["smoke"]


def preset(name: str, *, episodes: int | None = None, seed: int | None = None) -> Scenario:
    """Resolve a named preset such as ``fp-hetero-payoff`` or ``smoke``."""
    if name == "smoke":
        auction = auction_config(SMOKE_AUCTION)
        scenario = Scenario(
            name="smoke",
            roster=hetero_roster(auction.num_bidders),
            episodes=10,
            auction=auction,
            learner=learner_config(SMOKE_LEARNER),
        )
        return scenario.replace(episodes=episodes, seed=seed)
    parts = name.split("-")
    if (
        len(parts) != 3
        or parts[0] not in _GAMES
        or parts[1] not in _ROSTERS
        or parts[2] not in _SIGNALS
    ):
        raise ScenarioError(
            f"unknown preset {name!r}; expected one of {', '.join(preset_names())}"
        )
    game, roster, signal = parts
    auction = AuctionConfig(game_kind=_GAMES[game])
    scenario = Scenario(
        name=name,
        roster=_roster(roster, auction.num_bidders),
        signal_kind=_SIGNALS[signal],
        auction=auction,
    )
    return scenario.replace(episodes=episodes, seed=seed)


def load_scenario(
    ref: str | Path, *, episodes: int | None = None, seed: int | None = None
) -> Scenario:
    """A preset name, or a TOML file whose ``[scenario]`` table may name a ``preset`` base."""
    path = Path(ref)
    if not (path.suffix == ".toml" or path.is_file()):
        return preset(str(ref), episodes=episodes, seed=seed)
    try:
        doc = load_config_file(path)
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    table = dict(doc.scenario)
    base = preset(str(table.pop("preset", "fp-hetero-payoff")))
    merged = base.to_dict()
    merged["name"] = table.pop("name", path.stem)
    # the base preset game only applies when neither table names one
    del merged["game_kind"]
    for key in ("game_kind", "roster", "extrinsic_signal", "episodes", "seed"):
        if key in table:
            merged[key] = table.pop(key)
    if table:
        raise ScenarioError(f"{path}: unknown keys in [scenario]: {', '.join(sorted(table))}")
    merged["auction"].update(doc.auction)
    merged["learner"].update(doc.learner)
    try:
        scenario = Scenario.from_dict(merged)
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario.replace(episodes=episodes, seed=seed)


# ---- metrics ----


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    episode: int
    step: int
    bidder_id: int
    agent_kind: str
    payoff: float
    reserve: float
    intrinsic_reward: float | None
    forward_loss: float | None
    inverse_loss: float | None
    epsilon_last: float | None
    price: float
    participation: str
    payment: float = 0.0
    refill: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "MetricsRow":
        names = [f.name for f in dataclasses.fields(cls)]
        missing = [n for n in names if n not in doc]
        if missing:
            raise ValueError(f"missing fields {', '.join(missing)}")
        row = cls(**{n: doc[n] for n in names})
        for name in ("payoff", "reserve", "price", "payment"):
            value = getattr(row, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"{name} is not a finite number: {value!r}")
        if row.agent_kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {row.agent_kind!r}")
        return row


def metrics_rows(log: EpisodeLog, run_id: str, roster: Sequence[str]) -> list[MetricsRow]:
    """Flatten an episode log; curiosity fields carry the last update's values forward."""
    last: dict[int, dict[str, float]] = {}
    rows = []
    for record in log.rows:
        kind = roster[record.bidder_id]
        if record.diagnostics:
            last[record.bidder_id] = record.diagnostics
        diag = last.get(record.bidder_id, {}) if kind != "SHT" else {}
        rows.append(
            MetricsRow(
                run_id=run_id,
                episode=log.episode,
                step=record.step,
                bidder_id=record.bidder_id,
                agent_kind=kind,
                payoff=record.utility,
                reserve=record.reserve_after,
                intrinsic_reward=diag.get("intrinsic_reward"),
                forward_loss=diag.get("forward_loss"),
                inverse_loss=diag.get("inverse_loss"),
                epsilon_last=diag.get("epsilon"),
                price=record.price,
                participation=record.participation.value,
                payment=record.payment,
                refill=record.refill,
            )
        )
    return rows


# ---- running ----


def _versions() -> dict[str, str]:
    import torch

    from . import __version__

    return {
        "bidarena": __version__,
        "numpy": np.__version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
    }


def read_manifest(run_dir: str | Path) -> dict[str, Any]:
    path = Path(run_dir) / MANIFEST_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ScenarioError(f"{run_dir} has no {MANIFEST_FILE}") from exc


def _write_manifest(run_dir: Path, scenario: Scenario, completed: int, status: str) -> None:
    manifest = {
        "run_id": scenario.run_id,
        "scenario": scenario.to_dict(),
        "episodes_completed": completed,
        "checkpoint_version": completed,
        "status": status,
        "files": {"metrics": METRICS_FILE, "checkpoints": CHECKPOINT_FILE},
        "versions": _versions(),
    }
    (run_dir / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def build_agents(scenario: Scenario) -> list[FSPAgent]:
    """One agent per roster slot, each on its own named rng and torch seed."""
    agents = []
    for i, kind in enumerate(scenario.roster):
        agents.append(
            make_agent(
                kind,
                i,
                scenario.learner,
                scenario.auction,
                spawn_rng(scenario.seed, f"agent/{i}"),
                torch_seed=torch_seed(scenario.seed, f"agent/{i}"),
                signal_kind=scenario.signal_kind,
            )
        )
    return agents


def run_scenario(
    scenario: Scenario,
    out_dir: str | Path,
    *,
    resume: bool = False,
    store: _BaseCheckpointStore | None = None,
) -> Path:
    """Play ``scenario.episodes`` episodes and write the run directory.

    With ``resume`` the agents are restored from the store at the version
    recorded in the manifest and the new episodes are appended.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_id = scenario.run_id
    own_store = store is None
    if store is None:
        store = SQLiteCheckpointStore(str(run_dir / CHECKPOINT_FILE))

    agents = build_agents(scenario)
    start = 0
    if resume:
        manifest = read_manifest(run_dir)
        if manifest["run_id"] != run_id:
            raise ScenarioError(
                f"{run_dir} holds run {manifest['run_id']!r}, not {run_id!r}"
            )
        start = int(manifest["episodes_completed"])
        for agent in agents:
            agent.load_state_dict(store.load(run_id, agent.bidder_id, start))
        logger.info("resuming %s at episode %d", run_id, start)
    else:
        (run_dir / METRICS_FILE).write_text("", encoding="utf-8")

    low, high = scenario.auction.valuation_range
    n = scenario.auction.num_bidders
    logger.info(
        "running %s: %s, %s signal, episodes %d..%d",
        run_id, scenario.game_kind.value, scenario.signal_kind.value,
        start, start + scenario.episodes - 1,
    )
    completed = start
    try:
        with open(run_dir / METRICS_FILE, "a", encoding="utf-8") as fh:
            for episode in range(start, start + scenario.episodes):
                valuations = spawn_rng(scenario.seed, "valuations", str(episode)).uniform(
                    low, high, size=n
                )
                log = run_episode(
                    agents,
                    scenario.auction,
                    spawn_rng(scenario.seed, "engine", str(episode)),
                    signal_kind=scenario.signal_kind,
                    valuations=valuations,
                    episode=episode,
                )
                for row in metrics_rows(log, run_id, scenario.roster):
                    fh.write(row.to_json() + "\n")
                fh.flush()
                if log.aborted is not None:
                    _write_manifest(run_dir, scenario, completed, "aborted")
                    raise EpisodeAborted(
                        f"episode {episode} aborted at step {log.aborted.step} by bidder "
                        f"{log.aborted.bidder_id}: {log.aborted.error}"
                    )
                completed = episode + 1
                logger.debug(
                    "episode %d: signals %s", episode,
                    {k: round(v, 4) for k, v in log.signals.items()},
                )

        for agent in agents:
            store.save(run_id, agent.bidder_id, agent.state_dict(), completed)
        _write_manifest(run_dir, scenario, completed, "complete")
        logger.info("wrote %s (%d episodes, %s)", run_dir, completed, store.checkpoint_info())
    finally:
        if own_store:
            store.close()  # type: ignore[attr-defined]
    return run_dir


def resume_run(
    run_dir: str | Path, episodes: int, *, store: _BaseCheckpointStore | None = None
) -> Path:
    """Continue a finished run for ``episodes`` more episodes."""
    manifest = read_manifest(run_dir)
    scenario = Scenario.from_dict(manifest["scenario"]).replace(episodes=episodes)
    return run_scenario(scenario, run_dir, resume=True, store=store)


# ---- aggregation ----


def _metrics_path(ref: Path) -> Path:
    path = ref / METRICS_FILE if ref.is_dir() else ref
    if not path.is_file():
        raise MetricsFormatError(f"{ref}: no {METRICS_FILE} found")
    return path


def read_metrics(ref: str | Path) -> list[MetricsRow]:
    path = _metrics_path(Path(ref))
    rows: list[MetricsRow] = []
    errors: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(MetricsRow.from_json(json.loads(line)))
            except (ValueError, TypeError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    if errors:
        raise MetricsFormatError("corrupt metrics rows:\n" + "\n".join(errors))
    if not rows:
        raise MetricsFormatError(f"{path}: no metrics rows")
    return rows


def _mean(values: Iterable[float]) -> float | None:
    values = list(values)
    return math.fsum(values) / len(values) if values else None


def smooth(series: Sequence[float | None], window: int) -> list[float | None]:
    """Trailing moving average that skips missing points."""
    if window < 1:
        raise ValueError("smoothing window must be >= 1")
    out: list[float | None] = []
    for i in range(len(series)):
        out.append(_mean(v for v in series[max(0, i - window + 1):i + 1] if v is not None))
    return out


@dataclass
class RunCurves:
    """Episode curves of one run, aligned with :attr:`Summary.episodes`."""

    roster: str  # the single agent kind, or "HETERO"
    signal: str | None  # extrinsic signal from the manifest, when known
    agent_payoff: dict[str, list[float | None]]
    payoff_performance: dict[str, list[float | None]]
    fairness_performance: list[float | None]
    social_welfare: list[float | None]


@dataclass
class Summary:
    runs: list[str]
    episodes: list[int]
    payoff_performance: dict[str, list[float | None]]
    fairness_performance: list[float | None]
    social_welfare: list[float | None]
    intrinsic_reward: dict[str, list[float | None]]
    forward_loss: dict[str, list[float | None]]
    smoothing: int = 10
    per_run: dict[str, RunCurves] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Summary":
        doc = dict(doc)
        per_run = {run: RunCurves(**curves) for run, curves in doc.pop("per_run", {}).items()}
        return cls(**doc, per_run=per_run)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        path.write_text(text + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Summary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def final_quartile(self, series: Sequence[float | None]) -> float | None:
        tail = series[len(series) - max(1, len(series) // 4):]
        return _mean(v for v in tail if v is not None)


def summarize(
    rows: Iterable[MetricsRow],
    smoothing: int = 10,
    signals: Mapping[str, str] | None = None,
) -> Summary:
    """Summary of already parsed rows; the result does not depend on row order.

    ``signals`` maps run ids to their extrinsic signal, which the rows do not carry.
    """
    signals = signals or {}
    payoff: dict[tuple[str, int, int], list[float]] = defaultdict(list)
    payment: dict[tuple[str, int, int], list[float]] = defaultdict(list)
    kinds: dict[tuple[str, int], str] = {}
    curiosity: dict[tuple[str, str, int], list[float]] = defaultdict(list)
    for row in rows:
        key = (row.run_id, row.episode, row.bidder_id)
        payoff[key].append(row.payoff)
        payment[key].append(row.payment)
        kinds[(row.run_id, row.bidder_id)] = row.agent_kind
        for name in ("intrinsic_reward", "forward_loss"):
            value = getattr(row, name)
            if value is not None:
                curiosity[(name, row.agent_kind, row.episode)].append(value)
    if not payoff:
        raise MetricsFormatError("no metrics rows to aggregate")

    runs = sorted({run for run, _, _ in payoff})
    episodes = sorted({ep for _, ep, _ in payoff})
    present_kinds = sorted(set(kinds.values()))
    totals = {key: math.fsum(values) for key, values in payoff.items()}
    paid = {key: math.fsum(values) for key, values in payment.items()}

    perf: dict[str, list[float | None]] = {kind: [] for kind in present_kinds}
    fairness: list[float | None] = []
    welfare: list[float | None] = []
    run_fairness: dict[str, list[float | None]] = {run: [] for run in runs}
    run_welfare: dict[str, list[float | None]] = {run: [] for run in runs}
    for ep in episodes:
        for kind in present_kinds:
            perf[kind].append(_mean(
                total for (run, e, b), total in totals.items()
                if e == ep and kinds[(run, b)] == kind
            ))
        j_values, w_values = [], []
        for run in runs:
            bidders = sorted(b for (r, e, b) in totals if r == run and e == ep)
            if not bidders:
                run_fairness[run].append(None)
                run_welfare[run].append(None)
                continue
            j = jain_index([paid[(run, ep, b)] for b in bidders])
            w = math.fsum(totals[(run, ep, b)] for b in bidders)
            run_fairness[run].append(j)
            run_welfare[run].append(w)
            j_values.append(j)
            w_values.append(w)
        fairness.append(_mean(j_values))
        welfare.append(_mean(w_values))

    per_run = {}
    for run in runs:
        roster = {b: kind for (r, b), kind in kinds.items() if r == run}
        run_kinds = sorted(set(roster.values()))
        per_run[run] = RunCurves(
            roster=run_kinds[0] if len(run_kinds) == 1 else "HETERO",
            signal=signals.get(run),
            agent_payoff={
                f"bidder {b} ({kind})": [totals.get((run, ep, b)) for ep in episodes]
                for b, kind in sorted(roster.items())
            },
            payoff_performance={
                kind: [
                    _mean(
                        totals[(run, ep, b)]
                        for b, k in roster.items()
                        if k == kind and (run, ep, b) in totals
                    )
                    for ep in episodes
                ]
                for kind in run_kinds
            },
            fairness_performance=run_fairness[run],
            social_welfare=run_welfare[run],
        )

    def curves(name: str) -> dict[str, list[float | None]]:
        out = {}
        for kind in present_kinds:
            raw = [_mean(curiosity.get((name, kind, ep), ())) for ep in episodes]
            if any(v is not None for v in raw):
                out[kind] = smooth(raw, smoothing)
        return out

    return Summary(
        runs=runs,
        episodes=episodes,
        payoff_performance=perf,
        fairness_performance=fairness,
        social_welfare=welfare,
        intrinsic_reward=curves("intrinsic_reward"),
        forward_loss=curves("forward_loss"),
        smoothing=smoothing,
        per_run=per_run,
    )


def _run_signal(ref: Path) -> tuple[str, str] | None:
    run_dir = ref if ref.is_dir() else ref.parent
    try:
        manifest = read_manifest(run_dir)
        return manifest["run_id"], manifest["scenario"]["extrinsic_signal"]
    except (ScenarioError, KeyError, ValueError) as exc:
        logger.warning("no scenario signal for %s: %s", ref, exc)
        return None


def aggregate(run_dirs: Sequence[str | Path], smoothing: int = 10) -> Summary:
    if not run_dirs:
        raise MetricsFormatError("no run directories given")
    rows: list[MetricsRow] = []
    signals: dict[str, str] = {}
    for ref in run_dirs:
        rows.extend(read_metrics(ref))
        found = _run_signal(Path(ref))
        if found is not None:
            signals[found[0]] = found[1]
    summary = summarize(rows, smoothing, signals)
    logger.info("aggregated %d rows from %d run(s)", len(rows), len(summary.runs))
    return summary


# ---- plots ----

PLOT_FILES = {
    "payoff_performance": "payoff_performance.png",
    "agent_payoff": "agent_payoff.png",
    "fairness_performance": "fairness_performance.png",
    "social_welfare": "social_welfare.png",
    "roster_comparison": "roster_comparison.png",
    "signal_comparison": "signal_comparison.png",
    "intrinsic_reward": "intrinsic_reward.png",
    "forward_loss": "forward_loss.png",
}


def _draw(ax, episodes: Sequence[int], series: Mapping[str, Sequence[float | None]]) -> None:
    drawn = False
    for label, values in sorted(series.items()):
        points = [(e, v) for e, v in zip(episodes, values) if v is not None]
        if not points:
            continue
        xs, ys = zip(*points)
        ax.plot(xs, ys, linewidth=1.5, label=label)
        drawn = True
    if drawn:
        ax.legend()
        ax.grid(True, linestyle="--", alpha=0.7)
    else:
        ax.text(0.5, 0.5, "no data", transform=ax.transAxes, ha="center", va="center")


def _pointwise_mean(curves: Sequence[Sequence[float | None]]) -> list[float | None]:
    return [_mean(v for v in column if v is not None) for column in zip(*curves)]


def _mean_agent_payoff(curves: RunCurves) -> list[float | None]:
    return _pointwise_mean(list(curves.agent_payoff.values()))


def _grouped(
    summary: Summary, group: str, curve: Callable[[RunCurves], Sequence[float | None]]
) -> dict[str, list[float | None]]:
    """Pointwise mean of ``curve`` over the runs sharing each value of ``group``."""
    members: dict[str, list[Sequence[float | None]]] = defaultdict(list)
    for run in summary.runs:
        curves = summary.per_run.get(run)
        key = getattr(curves, group) if curves is not None else None
        if key is not None:
            members[key].append(curve(curves))
    return {key: _pointwise_mean(found) for key, found in members.items()}


def _agent_series(summary: Summary) -> dict[str, list[float | None]]:
    if len(summary.per_run) == 1:
        (curves,) = summary.per_run.values()
        return dict(curves.agent_payoff)
    return {
        f"{run} {agent}": values
        for run, curves in summary.per_run.items()
        for agent, values in curves.agent_payoff.items()
    }


def emit_plots(summary: Summary, out_dir: str | Path) -> list[Path]:
    """Write every chart in :data:`PLOT_FILES`; the same summary always gives the same files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = {
        "payoff_performance": (
            "Payoff-performance per agent, by algorithm type",
            "mean cumulated payoff",
            summary.payoff_performance,
        ),
        "agent_payoff": (
            "Cumulated payoff of each agent",
            "cumulated payoff",
            _agent_series(summary),
        ),
        "fairness_performance": (
            "Fairness-performance",
            "J-index",
            {"J-index": summary.fairness_performance},
        ),
        "social_welfare": (
            "Social welfare per run",
            "sum of cumulated payoffs",
            {run: curves.social_welfare for run, curves in summary.per_run.items()},
        ),
        "roster_comparison": (
            "Mean payoff per agent, by roster",
            "mean cumulated payoff",
            _grouped(summary, "roster", _mean_agent_payoff),
        ),
        "intrinsic_reward": (
            f"Intrinsic reward (moving average, window {summary.smoothing})",
            "intrinsic reward",
            summary.intrinsic_reward,
        ),
        "forward_loss": (
            f"Forward model loss (moving average, window {summary.smoothing})",
            "forward loss",
            summary.forward_loss,
        ),
    }

    def save(fig, key: str) -> Path:
        fig.tight_layout()
        path = out / PLOT_FILES[key]
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        logger.info("saved figure %s", path)
        return path

    written = []
    for key in PLOT_FILES:
        if key == "signal_comparison":
            fig, (left, right) = plt.subplots(1, 2, figsize=(12, 5))
            _draw(left, summary.episodes, _grouped(summary, "signal", _mean_agent_payoff))
            left.set_title("Mean payoff per agent, by extrinsic signal")
            left.set_ylabel("mean cumulated payoff")
            _draw(
                right,
                summary.episodes,
                _grouped(summary, "signal", lambda c: c.fairness_performance),
            )
            right.set_title("Fairness-performance, by extrinsic signal")
            right.set_ylabel("J-index")
            for ax in (left, right):
                ax.set_xlabel("episode")
            written.append(save(fig, key))
            continue
        title, ylabel, series = panels[key]
        fig, ax = plt.subplots(figsize=(8, 5))
        _draw(ax, summary.episodes, series)
        ax.set_title(title)
        ax.set_xlabel("episode")
        ax.set_ylabel(ylabel)
        written.append(save(fig, key))
    return written


# ---- equilibrium checks ----

POTENTIAL_TOL = 1e-9
RATIO_TOL = 1e-3
SPA_GRID_POINTS = 200


@dataclass(frozen=True)
class CheckResult:
    source: str
    check: str
    passed: bool
    metrics: dict[str, float | None] = field(default_factory=dict)
    threshold: float | None = None
    error: str | None = None

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.error:
            return f"{status} {self.source} [{self.check}]: {self.error}"
        shown = ", ".join(
            f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
            for k, v in self.metrics.items()
        )
        return f"{status} {self.source} [{self.check}] {shown} (threshold {self.threshold:g})"


@dataclass(frozen=True)
class VerificationReport:
    seed: int
    trials: int
    results: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def format(self) -> str:
        lines = [r.describe() for r in self.results]
        status = "all checks passed" if self.passed else "FAILED"
        lines.append(f"{status} (seed {self.seed}, trials {self.trials})")
        return "\n".join(lines)


def _check_potential(
    source: str, inst: gt.PotentialGameInstance, trials: int, rng: np.random.Generator
) -> CheckResult:
    worst = gt.verify_exact_potential(inst, trials, rng)
    return CheckResult(
        source, "exact_potential", worst <= POTENTIAL_TOL, {"max_deviation": worst}, POTENTIAL_TOL
    )


def _check_spa(source: str, inst: gt.SPAInstance) -> CheckResult:
    low, high = inst.supports[1]
    step = (high - low) / SPA_GRID_POINTS
    curve = gt.best_response_curve(
        inst, gt.uniform_grid(low, high, step), gt.uniform_grid(0.0, inst.budgets[1], step)
    )
    tol = 2 * curve.bid_step
    a1, b1 = inst.anchors
    report = gt.check_piecewise_linear_form(curve, a1, b1, tol)
    return CheckResult(
        source,
        "best_response_form",
        report.passed(tol),
        {
            "theta1": report.theta1,
            "theta2": report.theta2,
            "slope": report.slope,
            "intercept": report.intercept,
            "max_residual": report.max_residual,
            "anchor_error": report.anchor_error,
        },
        tol,
    )


def _check_pareto(source: str, inst: gt.ParetoInstance, rng: np.random.Generator) -> CheckResult:
    report = gt.verify_welfare_optimality(inst, tol=RATIO_TOL, rng=rng)
    ratio_gap = abs(report.achieved_ratio - inst.gamma)
    return CheckResult(
        source,
        "welfare_optimality",
        report.passed and ratio_gap <= RATIO_TOL,
        {
            "lambda_star": report.lambda_star,
            "ratio_gap": ratio_gap,
            "a_star_welfare": report.a_star_welfare,
            "best_rival_welfare": report.best_rival_welfare,
            "feasible_rivals": report.feasible_rivals,
        },
        RATIO_TOL,
    )


def _load_instances(instance_dir: Path) -> tuple[dict[str, Any], list[CheckResult]]:
    instances: dict[str, Any] = {}
    failures: list[CheckResult] = []
    files = sorted(instance_dir.glob("*.json"))
    if not files:
        failures.append(
            CheckResult(str(instance_dir), "parse", False, error="no *.json instance files")
        )
    for path in files:
        try:
            instances[path.name] = gt.instance_from_dict(
                json.loads(path.read_text(encoding="utf-8"))
            )
        except (ValueError, TypeError) as exc:
            failures.append(CheckResult(path.name, "parse", False, error=str(exc)))
    return instances, failures


def verify_appendix(
    instance_dir: str | Path | None = None, trials: int = 200, seed: int = 0
) -> VerificationReport:
    """Run every equilibrium check on the instances in ``instance_dir``.

    Without a directory the bundled default instances are used. Files that
    fail to parse are listed as failed ``parse`` checks.
    """
    if instance_dir is None:
        instances: dict[str, Any] = {f"default:{k}": v for k, v in gt.default_instances().items()}
        results: list[CheckResult] = []
    else:
        instances, results = _load_instances(Path(instance_dir))
    for source, inst in instances.items():
        rng = spawn_rng(seed, "verify", source)
        try:
            if isinstance(inst, gt.PotentialGameInstance):
                results.append(_check_potential(source, inst, trials, rng))
            elif isinstance(inst, gt.SPAInstance):
                results.append(_check_spa(source, inst))
            else:
                results.append(_check_pareto(source, inst, rng))
        except ValueError as exc:
            logger.warning("check on %s failed: %s", source, exc)
            results.append(CheckResult(source, "solve", False, error=str(exc)))
    report = VerificationReport(seed, trials, tuple(results))
    for failure in report.failures:
        logger.warning("%s", failure.describe())
    return report


def write_default_instances(directory: str | Path) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, inst in gt.default_instances().items():
        path = out / f"{name}.json"
        path.write_text(json.dumps(inst.to_dict(), indent=2) + "\n", encoding="utf-8")
        written.append(path)
    return written
