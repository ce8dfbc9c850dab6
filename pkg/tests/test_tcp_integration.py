"""End-to-end TCP deployments: harness supervisor plus node subprocesses."""

from pathlib import Path

from dflshield.harness import read_report_csv, run_scenario
from dflshield.scenario import parse_scenario

TCP_BASE = """
[scenario]
name = "{name}"
seed = 3
nodes = 3
topology = "full"
security = "{security}"
rounds = 2
receive_timeout_ms = 400.0

[fabric]
backend = "tcp"

[train]
samples = 90
classes = 3
local_epochs = 1
"""


def run_tcp_scenario(tmp_path: Path, name: str, security: str) -> Path:
    cfg_path = tmp_path / f"{name}.toml"
    cfg_path.write_text(TCP_BASE.format(name=name, security=security))
    cfg = parse_scenario(cfg_path.read_text())
    out = tmp_path / "out"
    code = run_scenario(cfg, out_override=str(out), config_path=cfg_path)
    assert code == 0, f"tcp run exited {code}"
    return out / name


def test_tcp_baseline_three_nodes(tmp_path):
    run_dir = run_tcp_scenario(tmp_path, "tcp-base", "baseline")
    rows, _ = read_report_csv(run_dir / "report.csv")
    assert len(rows) == 3 * 2
    assert all(r["f1"] >= 0.0 for r in rows)
    # Resource sampling is live on this backend.
    assert any(r["ram_pct"] > 0 for r in rows)
    assert (run_dir / "controller_key.pem").exists()


def test_tcp_encryption_mtd_rotates_real_sockets(tmp_path):
    run_dir = run_tcp_scenario(tmp_path, "tcp-mtd", "encryption_mtd")
    rows, _ = read_report_csv(run_dir / "report.csv")
    assert len(rows) == 3 * 2
    import json

    metrics = json.loads((run_dir / "node_metrics.json").read_text())
    for node in metrics.values():
        events = node["events"]
        assert events.get("rotations", 0) >= 1
        assert events.get("rendezvous_applied", 0) >= 1
        assert events.get("starvation", 0) == 0
