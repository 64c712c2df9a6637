"""Scenarios, run directories, aggregation, plots, equilibrium checks and the CLI."""

from __future__ import annotations

import json
import math
import random
from pathlib import Path

import pytest

from bidarena import game_theory as gt
from bidarena import harness
from bidarena.cli import main
from bidarena.config import GameKind, SignalKind
from bidarena.harness import (
    CHECKPOINT_FILE,
    MANIFEST_FILE,
    METRICS_FILE,
    PLOT_FILES,
    EpisodeAborted,
    MetricsFormatError,
    MetricsRow,
    Scenario,
    ScenarioError,
    Summary,
    aggregate,
    emit_plots,
    hetero_roster,
    load_scenario,
    preset,
    preset_names,
    read_manifest,
    read_metrics,
    resume_run,
    run_scenario,
    smooth,
    summarize,
    verify_appendix,
    write_default_instances,
)
from bidarena.sqlite import SQLiteCheckpointStore

# --------------------------------------------------------------------------- #
# Fixtures
# --------------------------------------------------------------------------- #


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory) -> Path:
    """The ten-episode smoke scenario, run once for the whole module."""
    return run_scenario(preset("smoke", seed=1), tmp_path_factory.mktemp("smoke") / "run")


def _row(**changes) -> MetricsRow:
    fields = dict(
        run_id="r",
        episode=0,
        step=0,
        bidder_id=0,
        agent_kind="SHT",
        payoff=0.0,
        reserve=20.0,
        intrinsic_reward=None,
        forward_loss=None,
        inverse_loss=None,
        epsilon_last=None,
        price=0.0,
        participation="LOST",
        payment=0.0,
        refill=0.0,
    )
    fields.update(changes)
    return MetricsRow(**fields)


def _synthetic_rows() -> list[MetricsRow]:
    rows = []
    table = {
        # (episode, bidder): (kind, payoffs, payments, intrinsic, forward)
        (0, 0): ("SHT", [1.0, 2.0], [3.0, 0.0], None, None),
        (0, 1): ("DRA", [0.5, -0.5], [0.0, 1.0], [0.2, 0.4], [1.0, 3.0]),
        (1, 0): ("SHT", [0.0, 0.0], [0.0, 0.0], None, None),
        (1, 1): ("DRA", [4.0, 0.0], [2.0, 2.0], [0.6, 0.6], [2.0, 2.0]),
    }
    for (episode, bidder), (kind, payoffs, payments, intrinsic, forward) in table.items():
        for step in range(2):
            rows.append(
                _row(
                    episode=episode,
                    step=step,
                    bidder_id=bidder,
                    agent_kind=kind,
                    payoff=payoffs[step],
                    payment=payments[step],
                    intrinsic_reward=intrinsic[step] if intrinsic else None,
                    forward_loss=forward[step] if forward else None,
                )
            )
    return rows


def _write_rows(path: Path, rows: list[MetricsRow]) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    (path / METRICS_FILE).write_text("".join(r.to_json() + "\n" for r in rows), encoding="utf-8")
    return path


# --------------------------------------------------------------------------- #
# Scenarios
# --------------------------------------------------------------------------- #


def test_presets() -> None:
    names = preset_names()
    assert len(names) == 2 * 4 * 2 + 1
    assert "fp-hetero-payoff" in names and "smoke" in names

    scenario = preset("sp-dra-fairness", episodes=5, seed=3)
    assert scenario.game_kind is GameKind.SP_FORWARD
    assert scenario.roster == ("DRA",) * 6
    assert scenario.signal_kind is SignalKind.FAIRNESS
    assert (scenario.episodes, scenario.seed) == (5, 3)
    assert preset("fp-hetero-payoff").roster == hetero_roster(6)
    assert hetero_roster(6) == ("SHT", "CUR", "DRA", "SHT", "CUR", "DRA")

    with pytest.raises(ScenarioError, match="unknown preset"):
        preset("fp-everyone-payoff")


def test_scenario_validation() -> None:
    base = preset("smoke")
    with pytest.raises(ScenarioError, match="roster has 2"):
        base.replace(roster=("DRA", "DRA"))
    with pytest.raises(ScenarioError, match="XYZ"):
        base.replace(roster=("XYZ",) * 6)
    with pytest.raises(ScenarioError):
        base.replace(episodes=0)
    with pytest.raises(ScenarioError):
        base.replace(signal_kind="LOUDNESS")


def test_run_id_ignores_episode_count() -> None:
    a = preset("smoke", episodes=3, seed=1)
    assert a.run_id == preset("smoke", episodes=50, seed=1).run_id
    assert a.run_id != preset("smoke", seed=2).run_id
    assert a.run_id.startswith("smoke-s1-")


def test_scenario_document_round_trip() -> None:
    scenario = preset("sp-cur-fairness", episodes=7, seed=4)
    doc = json.loads(json.dumps(scenario.to_dict()))
    assert Scenario.from_dict(doc) == scenario
    with pytest.raises(ScenarioError, match="colour"):
        Scenario.from_dict({**doc, "colour": "red"})
    with pytest.raises(ScenarioError, match="roster"):
        Scenario.from_dict({k: v for k, v in doc.items() if k != "roster"})


def test_load_scenario_from_toml(tmp_path: Path) -> None:
    path = tmp_path / "longer.toml"
    path.write_text(
        '[scenario]\npreset = "sp-cur-payoff"\nseed = 9\n'
        "[auction]\nepisode_length = 30\n"
        "[learner]\nwindow = 4\n",
        encoding="utf-8",
    )
    scenario = load_scenario(path, episodes=2)
    assert scenario.name == "longer"
    assert scenario.game_kind is GameKind.SP_FORWARD
    assert scenario.roster == ("CUR",) * 6
    assert scenario.auction.episode_length == 30
    assert scenario.learner.window == 4
    assert (scenario.seed, scenario.episodes) == (9, 2)

    override = tmp_path / "fp.toml"
    override.write_text(
        '[scenario]\npreset = "sp-cur-payoff"\ngame_kind = "FP_REVERSE"\n', encoding="utf-8"
    )
    assert load_scenario(override).game_kind is GameKind.FP_REVERSE

    bad = tmp_path / "bad.toml"
    bad.write_text("[scenario]\nflavour = 1\n", encoding="utf-8")
    with pytest.raises(ScenarioError, match="flavour"):
        load_scenario(bad)

    assert load_scenario("smoke").name == "smoke"


# --------------------------------------------------------------------------- #
# Running
# --------------------------------------------------------------------------- #


def test_run_directory_layout(smoke_run: Path) -> None:
    assert {p.name for p in smoke_run.iterdir()} >= {MANIFEST_FILE, METRICS_FILE, CHECKPOINT_FILE}
    manifest = read_manifest(smoke_run)
    scenario = preset("smoke", seed=1)
    assert manifest["run_id"] == scenario.run_id
    assert manifest["episodes_completed"] == 10
    assert manifest["checkpoint_version"] == 10
    assert manifest["status"] == "complete"
    assert set(manifest["versions"]) >= {"bidarena", "numpy", "torch", "python"}

    store = SQLiteCheckpointStore(str(smoke_run / CHECKPOINT_FILE))
    try:
        assert all(store.latest_version(scenario.run_id, i) == 10 for i in range(6))
    finally:
        store.close()


def test_smoke_run_completes_with_finite_metrics(smoke_run: Path) -> None:
    manifest = read_manifest(smoke_run)
    assert (manifest["status"], manifest["episodes_completed"]) == ("complete", 10)
    rows = read_metrics(smoke_run)
    assert all(math.isfinite(r.payoff) and math.isfinite(r.reserve) for r in rows)
    assert all(math.isfinite(r.price) and math.isfinite(r.payment) for r in rows)


def test_smoke_accounting_is_conserved(smoke_run: Path) -> None:
    rows = read_metrics(smoke_run)
    scenario = preset("smoke", seed=1)
    length = scenario.auction.episode_length
    assert len(rows) == 10 * length * 6
    by_bidder: dict[tuple[int, int], list[MetricsRow]] = {}
    for row in rows:
        by_bidder.setdefault((row.episode, row.bidder_id), []).append(row)
    for series in by_bidder.values():
        series.sort(key=lambda r: r.step)
        reserve = scenario.auction.initial_reserve
        for row in series:
            assert row.reserve == pytest.approx(reserve + row.payoff + row.refill, abs=1e-9)
            reserve = row.reserve


def test_curiosity_fields_follow_agent_kind(smoke_run: Path) -> None:
    rows = read_metrics(smoke_run)
    sht = [r for r in rows if r.agent_kind == "SHT"]
    assert all(
        r.intrinsic_reward is None and r.forward_loss is None and r.epsilon_last is None
        for r in sht
    )
    dra = [r for r in rows if r.agent_kind == "DRA" and r.epsilon_last is not None]
    assert dra
    assert all(0.0 <= r.epsilon_last <= 1.0 for r in dra)
    cur = [r for r in rows if r.agent_kind == "CUR" and r.forward_loss is not None]
    assert cur
    assert all(r.epsilon_last == 1.0 for r in cur)


def test_replay_is_byte_identical(smoke_run: Path, tmp_path: Path) -> None:
    again = run_scenario(preset("smoke", seed=1), tmp_path / "again")
    assert (again / METRICS_FILE).read_bytes() == (smoke_run / METRICS_FILE).read_bytes()


def test_resume_continues_the_same_trajectory(smoke_run: Path, tmp_path: Path) -> None:
    run_dir = run_scenario(preset("smoke", episodes=1, seed=1), tmp_path / "resumed")
    resume_run(run_dir, 2)
    manifest = read_manifest(run_dir)
    assert manifest["episodes_completed"] == 3
    resumed = (run_dir / METRICS_FILE).read_text(encoding="utf-8").splitlines()
    straight = (smoke_run / METRICS_FILE).read_text(encoding="utf-8").splitlines()
    assert resumed == straight[: len(resumed)]
    assert len(resumed) == 3 * 20 * 6


def test_resume_rejects_another_scenario(tmp_path: Path) -> None:
    run_dir = run_scenario(preset("smoke", episodes=1, seed=1), tmp_path / "run")
    with pytest.raises(ScenarioError, match="holds run"):
        run_scenario(preset("smoke", episodes=1, seed=2), run_dir, resume=True)
    with pytest.raises(ScenarioError, match=MANIFEST_FILE):
        resume_run(tmp_path / "nowhere", 1)


def test_agent_failure_aborts_the_run(monkeypatch, tmp_path: Path) -> None:
    build = harness.build_agents

    def failing(scenario):
        agents = build(scenario)

        def learn(feedback):
            raise RuntimeError("diverged")

        agents[2].learn = learn
        return agents

    monkeypatch.setattr(harness, "build_agents", failing)
    with pytest.raises(EpisodeAborted, match="bidder 2"):
        run_scenario(preset("smoke", episodes=2, seed=0), tmp_path / "run")
    manifest = read_manifest(tmp_path / "run")
    assert manifest["status"] == "aborted"
    assert manifest["episodes_completed"] == 0


# --------------------------------------------------------------------------- #
# Metrics files
# --------------------------------------------------------------------------- #


def test_metrics_row_validation() -> None:
    row = _row(payoff=1.5)
    assert MetricsRow.from_json(json.loads(row.to_json())) == row
    doc = json.loads(row.to_json())
    with pytest.raises(ValueError, match="missing fields payment"):
        MetricsRow.from_json({k: v for k, v in doc.items() if k != "payment"})
    with pytest.raises(ValueError, match="payoff"):
        MetricsRow.from_json({**doc, "payoff": "lots"})
    with pytest.raises(ValueError, match="agent kind"):
        MetricsRow.from_json({**doc, "agent_kind": "ZZZ"})


def test_corrupt_lines_are_reported_with_numbers(tmp_path: Path) -> None:
    run_dir = _write_rows(tmp_path / "run", _synthetic_rows())
    lines = (run_dir / METRICS_FILE).read_text(encoding="utf-8").splitlines()
    lines[1] = "{not json"
    lines[4] = lines[4].replace('"payoff": ', '"payoff": "x", "_": ')
    (run_dir / METRICS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(MetricsFormatError) as info:
        read_metrics(run_dir)
    message = str(info.value)
    assert f"{METRICS_FILE}:2:" in message
    assert f"{METRICS_FILE}:5:" in message
    assert f"{METRICS_FILE}:1:" not in message


def test_missing_or_empty_metrics(tmp_path: Path) -> None:
    with pytest.raises(MetricsFormatError, match="no metrics.jsonl"):
        read_metrics(tmp_path)
    (tmp_path / METRICS_FILE).write_text("\n", encoding="utf-8")
    with pytest.raises(MetricsFormatError, match="no metrics rows"):
        read_metrics(tmp_path)
    with pytest.raises(MetricsFormatError):
        aggregate([])


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #


def test_smooth() -> None:
    assert smooth([1.0, None, 3.0, 5.0], 2) == [1.0, 1.0, 3.0, 4.0]
    assert smooth([None, None], 3) == [None, None]
    with pytest.raises(ValueError):
        smooth([1.0], 0)


def test_summary_matches_hand_computation(tmp_path: Path) -> None:
    summary = aggregate([_write_rows(tmp_path / "run", _synthetic_rows())], smoothing=2)
    assert summary.runs == ["r"]
    assert summary.episodes == [0, 1]
    assert summary.payoff_performance == {"DRA": [0.0, 4.0], "SHT": [3.0, 0.0]}
    # payments (3, 1) then (0, 4)
    assert summary.fairness_performance == pytest.approx([16 / 20, 16 / 32])
    assert summary.social_welfare == [3.0, 4.0]
    assert summary.intrinsic_reward["DRA"] == pytest.approx([0.3, 0.45])
    assert summary.forward_loss == {"DRA": [2.0, 2.0]}
    assert "SHT" not in summary.intrinsic_reward


def test_summary_ignores_row_order() -> None:
    rows = _synthetic_rows()
    expected = summarize(rows).to_dict()
    rng = random.Random(0)
    for _ in range(5):
        shuffled = rows[:]
        rng.shuffle(shuffled)
        assert summarize(shuffled).to_dict() == expected


def test_summary_file_round_trip(tmp_path: Path) -> None:
    summary = summarize(_synthetic_rows())
    path = summary.write(tmp_path / "out" / "summary.json")
    assert Summary.load(path) == summary
    assert summary.final_quartile([1, 2, 3, 4, 5, 6, 7, 8]) == 7.5
    assert summary.final_quartile([None, 2.0]) == 2.0


def _dra_run_rows() -> list[MetricsRow]:
    # two DRA bidders, episode 0 only; payment totals (2, 2)
    return [
        _row(run_id="d", step=step, bidder_id=b, agent_kind="DRA", payoff=p, payment=1.0)
        for b, payoffs in ((0, (1.0, 1.0)), (1, (2.0, 0.0)))
        for step, p in enumerate(payoffs)
    ]


def test_summary_keeps_each_run_apart(tmp_path: Path) -> None:
    rows = _synthetic_rows() + _dra_run_rows()
    summary = summarize(rows, signals={"r": "PAYOFF", "d": "FAIRNESS"})
    assert summary.runs == ["d", "r"]
    assert summary.social_welfare == [3.5, 4.0]

    dra, mixed = summary.per_run["d"], summary.per_run["r"]
    assert (dra.roster, dra.signal) == ("DRA", "FAIRNESS")
    assert (mixed.roster, mixed.signal) == ("HETERO", "PAYOFF")
    assert dra.agent_payoff == {"bidder 0 (DRA)": [2.0, None], "bidder 1 (DRA)": [2.0, None]}
    assert dra.social_welfare == [4.0, None]
    assert dra.fairness_performance == [1.0, None]
    assert mixed.agent_payoff == {"bidder 0 (SHT)": [3.0, 0.0], "bidder 1 (DRA)": [0.0, 4.0]}
    assert mixed.payoff_performance == {"DRA": [0.0, 4.0], "SHT": [3.0, 0.0]}
    assert mixed.fairness_performance == pytest.approx([16 / 20, 16 / 32])

    by_roster = harness._grouped(summary, "roster", harness._mean_agent_payoff)
    assert by_roster == {"DRA": [2.0, None], "HETERO": [1.5, 2.0]}
    by_signal = harness._grouped(summary, "signal", lambda c: c.social_welfare)
    assert by_signal == {"FAIRNESS": [4.0, None], "PAYOFF": [3.0, 4.0]}

    path = summary.write(tmp_path / "summary.json")
    assert Summary.load(path) == summary


def test_runs_without_a_manifest_have_no_signal(tmp_path: Path) -> None:
    summary = aggregate([_write_rows(tmp_path / "run", _synthetic_rows())])
    assert summary.per_run["r"].signal is None
    assert harness._grouped(summary, "signal", harness._mean_agent_payoff) == {}


def test_aggregate_real_run(smoke_run: Path) -> None:
    summary = aggregate([smoke_run])
    assert summary.episodes == list(range(10))
    assert set(summary.payoff_performance) == {"SHT", "CUR", "DRA"}
    assert set(summary.intrinsic_reward) == {"CUR", "DRA"}
    assert all(0.0 < j <= 1.0 for j in summary.fairness_performance)
    curves = summary.per_run[preset("smoke", seed=1).run_id]
    assert (curves.roster, curves.signal) == ("HETERO", "PAYOFF")
    assert len(curves.agent_payoff) == 6


# --------------------------------------------------------------------------- #
# Plots
# --------------------------------------------------------------------------- #


def test_emit_plots(tmp_path: Path) -> None:
    summary = summarize(_synthetic_rows())
    written = emit_plots(summary, tmp_path / "figs")
    assert sorted(p.name for p in written) == sorted(PLOT_FILES.values())
    assert all(p.stat().st_size > 0 for p in written)

    first = {p.name: p.read_bytes() for p in written}
    again = emit_plots(summary, tmp_path / "figs")
    assert {p.name: p.read_bytes() for p in again} == first


def test_emit_plots_without_curiosity_data(tmp_path: Path) -> None:
    rows = [r for r in _synthetic_rows() if r.agent_kind == "SHT"]
    summary = summarize(rows)
    assert summary.intrinsic_reward == {}
    written = emit_plots(summary, tmp_path)
    assert len(written) == len(PLOT_FILES)


def test_emit_plots_overlays_rosters_and_signals(tmp_path: Path) -> None:
    summary = summarize(
        _synthetic_rows() + _dra_run_rows(), signals={"r": "PAYOFF", "d": "FAIRNESS"}
    )
    written = emit_plots(summary, tmp_path)
    assert sorted(p.name for p in written) == sorted(PLOT_FILES.values())
    assert {"agent_payoff.png", "social_welfare.png"} <= {p.name for p in written}
    assert {"roster_comparison.png", "signal_comparison.png"} <= {p.name for p in written}
    assert all(p.stat().st_size > 0 for p in written)


# --------------------------------------------------------------------------- #
# Equilibrium checks
# --------------------------------------------------------------------------- #


def test_verify_default_instances() -> None:
    report = verify_appendix(trials=50, seed=0)
    assert report.passed, report.format()
    assert {r.check for r in report.results} == {
        "exact_potential",
        "best_response_form",
        "welfare_optimality",
    }
    assert all(r.source.startswith("default:") for r in report.results)
    assert verify_appendix(trials=50, seed=0).format() == report.format()


def test_verify_names_corrupt_files(tmp_path: Path) -> None:
    written = write_default_instances(tmp_path)
    assert sorted(p.name for p in written) == ["pareto.json", "potential.json", "spa.json"]
    (tmp_path / "broken.json").write_text("{not json", encoding="utf-8")
    (tmp_path / "odd.json").write_text('{"type": "lottery"}', encoding="utf-8")

    report = verify_appendix(tmp_path, trials=20)
    assert not report.passed
    failed = {(r.source, r.check) for r in report.failures}
    assert failed == {("broken.json", "parse"), ("odd.json", "parse")}
    assert "FAIL broken.json [parse]" in report.format()


def test_verify_empty_directory(tmp_path: Path) -> None:
    report = verify_appendix(tmp_path)
    assert not report.passed
    assert report.failures[0].check == "parse"


def test_verify_reports_infeasible_targets(tmp_path: Path) -> None:
    doc = {**gt.default_instances()["pareto"].to_dict(), "gamma": 3.0}
    (tmp_path / "far.json").write_text(json.dumps(doc), encoding="utf-8")
    report = verify_appendix(tmp_path)
    assert [(r.source, r.check) for r in report.failures] == [("far.json", "solve")]


# --------------------------------------------------------------------------- #
# Command line
# --------------------------------------------------------------------------- #


def test_cli_round_trip(tmp_path: Path, capsys) -> None:
    run_dir = tmp_path / "run"
    assert main(["run", "--scenario", "smoke", "--episodes", "1", "--out", str(run_dir)]) == 0
    assert (run_dir / METRICS_FILE).is_file()

    summary = tmp_path / "summary.json"
    assert main(["aggregate", "--in", str(run_dir), "--out", str(summary), "--smooth", "1"]) == 0
    assert Summary.load(summary).episodes == [0]

    figs = tmp_path / "figs"
    assert main(["plot", "--in", str(summary), "--out", str(figs)]) == 0
    assert sorted(p.name for p in figs.iterdir()) == sorted(PLOT_FILES.values())

    assert main(["run", "--resume", "--out", str(run_dir), "--episodes", "1"]) == 0
    assert read_manifest(run_dir)["episodes_completed"] == 2
    assert str(run_dir) in capsys.readouterr().out


def test_cli_errors(tmp_path: Path) -> None:
    assert main(["run", "--scenario", "fp-nobody-payoff"]) == 2
    assert main(["run"]) == 2
    assert main(["aggregate", "--in", str(tmp_path), "--out", str(tmp_path / "s.json")]) == 2


def test_cli_verify(tmp_path: Path) -> None:
    assert main(["verify", "--trials", "20"]) == 0
    assert main(["verify", "--write-defaults", str(tmp_path)]) == 0
    assert main(["verify", "--instances", str(tmp_path), "--trials", "20"]) == 0
    (tmp_path / "broken.json").write_text("[]", encoding="utf-8")
    assert main(["verify", "--instances", str(tmp_path)]) == 1


# --------------------------------------------------------------------------- #
# Long qualitative runs
# --------------------------------------------------------------------------- #


@pytest.mark.slow
def test_credit_agents_lead_the_mixed_roster(tmp_path: Path) -> None:
    wins = 0
    for seed in range(5):
        run_dir = run_scenario(preset("fp-hetero-payoff", seed=seed), tmp_path / f"s{seed}")
        summary = aggregate([run_dir])
        final = {k: summary.final_quartile(v) for k, v in summary.payoff_performance.items()}
        wins += final["DRA"] > final["CUR"] > final["SHT"]
    assert wins >= 4


@pytest.mark.slow
def test_fairness_signal_raises_the_j_index(tmp_path: Path) -> None:
    wins = 0
    for seed in range(5):
        fair_dir = run_scenario(preset("fp-dra-fairness", seed=seed), tmp_path / f"f{seed}")
        pay_dir = run_scenario(preset("fp-dra-payoff", seed=seed), tmp_path / f"p{seed}")
        fair, pay = aggregate([fair_dir]), aggregate([pay_dir])
        wins += fair.final_quartile(fair.fairness_performance) > pay.final_quartile(
            pay.fairness_performance
        )
    assert wins >= 4
