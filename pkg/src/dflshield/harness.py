"""Scenario execution, artifacts, and cross-run comparison.

A successful run writes a fixed artifact set into its run directory:
``report.csv`` (per node and round, plus an attack appendix when one was
configured), ``node_metrics.json``, ``frame_log.jsonl`` and
``fabric_metrics.csv`` (simulated backend), ``capture.jsonl`` (when an
attacker captured traffic), ``effective.toml``, and ``summary.json``.
``compare_runs`` joins several reports into a side-by-side table with
deltas, direction flags, and a plot-ready long-format CSV of F1 curves.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import threat
from .controller import aggregate_run
from .runner import RunResult, run_simulated, run_tcp
from .scenario import SETTING_ORDER, ScenarioConfig, to_toml

REPORT_HEADER = [
    "config",
    "node",
    "round",
    "f1",
    "loss",
    "cpu_pct",
    "ram_pct",
    "net_bytes",
    "throughput_mbps",
    "latency_ms",
    "loss_pct",
    "ctrl_overhead_pct",
]
ATTACK_HEADER = ["attack", "target", "isolated_rounds", "recovered", "success"]


class ComparisonError(Exception):
    """Report files disagree on schema."""


def bundled_scenarios() -> list[str]:
    files = resources.files("dflshield.configs")
    return sorted(p.name[: -len(".toml")] for p in files.iterdir() if p.name.endswith(".toml"))


def bundled_scenario_text(name: str) -> str:
    return resources.files("dflshield.configs").joinpath(f"{name}.toml").read_text()


def resolve_out_dir(cfg: ScenarioConfig, override: str | None) -> Path:
    env = os.environ.get("DFLSHIELD_OUT")
    base = Path(override or env or cfg.output_dir)
    return base


def _fmt(value, spec: str) -> str:
    return format(value, spec)


def write_report_csv(path: Path, cfg: ScenarioConfig, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for row in result.rows:
            writer.writerow(
                [
                    cfg.security.value,
                    row["node"],
                    row["round"],
                    _fmt(row["f1"], ".6f"),
                    _fmt(row["loss"], ".6f"),
                    _fmt(row["cpu_pct"], ".2f"),
                    _fmt(row["ram_pct"], ".2f"),
                    row["net_bytes"],
                    _fmt(row["throughput_mbps"], ".6f"),
                    _fmt(row["latency_ms"], ".4f"),
                    _fmt(row["loss_pct"], ".4f"),
                    _fmt(row["ctrl_overhead_pct"], ".4f"),
                ]
            )
        if result.attack_outcome is not None:
            writer.writerow([])
            writer.writerow(ATTACK_HEADER)
            writer.writerow(result.attack_outcome.csv_row())


def read_report_csv(path: Path) -> tuple[list[dict], dict | None]:
    """Returns (rows, attack_row) and validates the schema."""
    rows: list[dict] = []
    attack: dict | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise ComparisonError(f"{path}: unexpected report header {header}")
        section = "main"
        for raw in reader:
            if not raw or raw == [""]:
                section = "attack-header"
                continue
            if section == "attack-header":
                if raw != ATTACK_HEADER:
                    raise ComparisonError(f"{path}: unexpected attack header {raw}")
                section = "attack"
                continue
            if section == "attack":
                attack = dict(zip(ATTACK_HEADER, raw))
                continue
            rows.append(
                {
                    "config": raw[0],
                    "node": int(raw[1]),
                    "round": int(raw[2]),
                    "f1": float(raw[3]),
                    "loss": float(raw[4]),
                    "cpu_pct": float(raw[5]),
                    "ram_pct": float(raw[6]),
                    "net_bytes": int(raw[7]),
                    "bytes_sent": int(raw[7]),  # alias used by the aggregator
                    "throughput_mbps": float(raw[8]),
                    "latency_ms": float(raw[9]),
                    "loss_pct": float(raw[10]),
                    "ctrl_overhead_pct": float(raw[11]),
                }
            )
    return rows, attack


def write_artifacts(run_dir: Path, cfg: ScenarioConfig, result: RunResult) -> dict[str, Path]:
    run_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    report = run_dir / "report.csv"
    write_report_csv(report, cfg, result)
    paths["report"] = report

    node_metrics = run_dir / "node_metrics.json"
    per_node: dict[str, dict] = {}
    for node_id, events in sorted(result.events_by_node.items()):
        node_rows = [r for r in result.rows if r["node"] == node_id]
        per_node[str(node_id)] = {"events": events, "rounds": node_rows}
    node_metrics.write_text(json.dumps(per_node, indent=2, sort_keys=True) + "\n")
    paths["node_metrics"] = node_metrics

    effective = run_dir / "effective.toml"
    effective.write_text(to_toml(cfg))
    paths["effective"] = effective

    if result.event_log:
        frame_log = run_dir / "frame_log.jsonl"
        with open(frame_log, "w") as fh:
            for rec in result.event_log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        paths["frame_log"] = frame_log

    if result.stats is not None:
        fabric_csv = run_dir / "fabric_metrics.csv"
        result.stats.export_csv(fabric_csv)
        paths["fabric_metrics"] = fabric_csv

    if result.capture is not None:
        capture = run_dir / "capture.jsonl"
        result.capture.export_jsonl(capture)
        paths["capture"] = capture

    summary = run_dir / "summary.json"
    fabric_totals = result.stats.totals() if result.stats is not None else None
    summary_doc = {
        "scenario": cfg.name,
        "security": cfg.security.value,
        "seed": cfg.seed,
        "nodes": cfg.nodes,
        "rounds": cfg.rounds,
        "aborted": result.aborted,
        "abort_reason": result.abort_reason,
        "elapsed_s": round(result.elapsed_s, 3),
        "aggregates": result.aggregates,
        "fabric_total_bytes": fabric_totals.bytes_sent if fabric_totals else None,
        "fabric_control_bytes": fabric_totals.control_bytes if fabric_totals else None,
        "protected_information": [i.value for i in threat.PROTECTED_BY_SETTING[cfg.security.value]],
        "mitigated_attacks": [a.value for a in threat.mitigated_attacks(cfg.security.value)],
        "attack": (
            {
                "kind": result.attack_outcome.kind,
                "target": result.attack_outcome.target_id,
                "isolated_rounds": result.attack_outcome.isolated_rounds,
                "window_rounds": result.attack_outcome.window_rounds,
                "control_established": result.attack_outcome.control_established,
                "recovered": result.attack_outcome.plaintext_param_sets_recovered,
                "mimic_frames_sent": result.attack_outcome.mimic_frames_sent,
                "topology_recall": result.attack_outcome.topology_recall,
                "success": result.attack_outcome.success,
                **result.attack_extra,
            }
            if result.attack_outcome is not None
            else None
        ),
        "warnings": result.warnings,
    }
    summary.write_text(json.dumps(summary_doc, indent=2, sort_keys=True, default=str) + "\n")
    paths["summary"] = summary
    return paths


def run_scenario(
    cfg: ScenarioConfig,
    out_override: str | None = None,
    seed_override: int | None = None,
    backend_override: str | None = None,
    matrix: bool = False,
    config_path: Path | None = None,
) -> int:
    """Execute one scenario (or the three-setting matrix) and write artifacts.

    Returns the process exit code: 0 on success, 1 on runtime abort.
    Validation failures raise ConfigError before anything runs.
    """
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override, fabric=replace(cfg.fabric, seed=seed_override))
    if backend_override is not None:
        cfg = replace(cfg, fabric=replace(cfg.fabric, backend=backend_override))
    cfg.validate()
    out_base = resolve_out_dir(cfg, out_override)

    targets: list[tuple[ScenarioConfig, Path]] = []
    if matrix:
        for setting in SETTING_ORDER:
            sub = replace(cfg, security=setting)
            targets.append((sub, out_base / f"{cfg.name}--{setting.value}"))
    else:
        targets.append((cfg, out_base / cfg.name))

    status = 0
    reports: list[Path] = []
    for sub_cfg, run_dir in targets:
        result = _execute(sub_cfg, run_dir, config_path)
        paths = write_artifacts(run_dir, sub_cfg, result)
        reports.append(paths["report"])
        print(f"[{sub_cfg.security.value}] {sub_cfg.name}: ", end="")
        if result.aborted:
            print(f"ABORTED ({result.abort_reason}); partial artifacts in {run_dir}")
            status = 1
        else:
            agg = result.aggregates
            print(
                f"f1={agg.get('f1_mean', 0.0):.4f} "
                f"net={agg.get('network_mb', 0.0):.2f}MB "
                f"ctrl={result.control_overhead_pct():.2f}% "
                f"({result.elapsed_s:.1f}s) -> {run_dir}"
            )
    if matrix and status == 0:
        compare_runs(reports, out_base / f"{cfg.name}--comparison")
    return status


def _execute(cfg: ScenarioConfig, run_dir: Path, config_path: Path | None) -> RunResult:
    if cfg.fabric.backend == "sim":
        return run_simulated(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    effective = run_dir / "effective.toml"
    effective.write_text(to_toml(cfg))
    return run_tcp(cfg, effective, run_dir)


def compare_runs(report_paths: list[Path], out_dir: Path) -> list[dict]:
    """Side-by-side aggregates with deltas against the first report.

    Rows are ordered baseline, encryption, encryption_mtd (then anything
    else in input order). Writes ``comparison.csv``, the plot-ready
    ``f1_curves.csv`` (config, round, f1_mean), and ``threat_matrix.json``.
    """
    if len(report_paths) < 2:
        raise ComparisonError("need at least two reports to compare")
    parsed = []
    for path in report_paths:
        rows, attack = read_report_csv(Path(path))
        if not rows:
            raise ComparisonError(f"{path}: empty report")
        parsed.append({"path": str(path), "config": rows[0]["config"], "rows": rows, "attack": attack})

    order = {s.value: i for i, s in enumerate(SETTING_ORDER)}
    parsed.sort(key=lambda p: (order.get(p["config"], len(order)), p["path"]))

    table: list[dict] = []
    base_agg: dict | None = None
    for entry in parsed:
        agg = aggregate_run(entry["rows"])
        row = {"config": entry["config"], **{k: agg[k] for k in sorted(agg)}}
        if base_agg is None:
            base_agg = agg
            row["net_mb_delta"] = 0.0
            row["ctrl_overhead_delta"] = 0.0
            row["f1_delta"] = 0.0
        else:
            row["net_mb_delta"] = agg["network_mb"] - base_agg["network_mb"]
            row["ctrl_overhead_delta"] = agg["ctrl_overhead_pct"] - base_agg["ctrl_overhead_pct"]
            row["f1_delta"] = agg["f1_mean"] - base_agg["f1_mean"]
        row["direction"] = "".join(
            ("+" if row[k] > 0 else "-" if row[k] < 0 else "=")
            for k in ("net_mb_delta", "ctrl_overhead_delta", "f1_delta")
        )
        if entry["attack"]:
            row["attack_success"] = entry["attack"]["success"]
            row["attack_recovered"] = entry["attack"]["recovered"]
        table.append(row)

    out_dir.mkdir(parents=True, exist_ok=True)
    columns = sorted({k for row in table for k in row})
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in table:
            writer.writerow([row.get(c, "") for c in columns])

    with open(out_dir / "f1_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "round", "f1_mean"])
        for entry in parsed:
            by_round: dict[int, list[float]] = {}
            for r in entry["rows"]:
                by_round.setdefault(r["round"], []).append(r["f1"])
            for rnd in sorted(by_round):
                vals = by_round[rnd]
                writer.writerow([entry["config"], rnd, f"{sum(vals) / len(vals):.6f}"])

    threat_doc = {
        "matrix": threat.threat_matrix(),
        "per_config": {
            entry["config"]: {
                "protected_information": [i.value for i in threat.PROTECTED_BY_SETTING.get(entry["config"], ())],
                "mitigated_attacks": [
                    a.value for a in threat.mitigated_attacks(entry["config"])
                ]
                if entry["config"] in threat.PROTECTED_BY_SETTING
                else [],
            }
            for entry in parsed
        },
    }
    (out_dir / "threat_matrix.json").write_text(json.dumps(threat_doc, indent=2, sort_keys=True) + "\n")
    return table
