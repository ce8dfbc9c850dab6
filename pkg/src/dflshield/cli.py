"""Command-line entry point.

    dflshield run --config baseline-8.toml [--seed N] [--backend sim|tcp] [--matrix]
    dflshield compare runs/a/report.csv runs/b/report.csv --out cmp/
    dflshield validate --config scenario.toml
    dflshield node --config scenario.toml --node-id 3 --listen 127.0.0.1:9103 ...

``run`` accepts a path or the name of a bundled scenario. Exit codes:
0 success, 1 runtime abort (partial artifacts flagged in summary.json),
2 invalid configuration or report schema.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import ComparisonError, bundled_scenario_text, bundled_scenarios, compare_runs, run_scenario
from .scenario import ConfigError, Role, ScenarioConfig, SecuritySetting, load_scenario, parse_scenario


def _load_config(text_path: str) -> tuple[ScenarioConfig, Path | None]:
    path = Path(text_path)
    if path.exists():
        return load_scenario(path), path
    if text_path in bundled_scenarios():
        return parse_scenario(bundled_scenario_text(text_path)), None
    raise ConfigError("config", f"no such file or bundled scenario: {text_path}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dflshield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario and write run artifacts")
    run_p.add_argument("--config", required=True, help="scenario TOML path or bundled scenario name")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--backend", choices=["sim", "tcp"], default=None)
    run_p.add_argument("--matrix", action="store_true", help="run all three security settings on identical seeds")
    run_p.add_argument("--out", default=None, help="output directory (also via DFLSHIELD_OUT)")

    cmp_p = sub.add_parser("compare", help="side-by-side comparison of run reports")
    cmp_p.add_argument("reports", nargs="+", help="report.csv paths")
    cmp_p.add_argument("--out", default="comparison")

    val_p = sub.add_parser("validate", help="check a scenario file")
    val_p.add_argument("--config", required=True)

    node_p = sub.add_parser("node", help="run a single TCP participant (spawned by the harness)")
    node_p.add_argument("--config", required=True)
    node_p.add_argument("--node-id", type=int, required=True)
    node_p.add_argument("--listen", required=True, help="ip:port to bind")
    node_p.add_argument("--controller", required=True, help="controller ip:port")
    node_p.add_argument("--controller-key", required=True, help="path to the controller public key PEM")
    node_p.add_argument("--rotation-base", type=int, default=21000)
    node_p.add_argument("--role", choices=[r.value for r in Role], default=None)
    node_p.add_argument("--security", choices=[s.value for s in SecuritySetting], default=None)

    list_p = sub.add_parser("scenarios", help="list bundled scenarios")
    del list_p
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg, cfg_path = _load_config(args.config)
            return run_scenario(
                cfg,
                out_override=args.out,
                seed_override=args.seed,
                backend_override=args.backend,
                matrix=args.matrix,
                config_path=cfg_path,
            )
        if args.command == "compare":
            table = compare_runs([Path(p) for p in args.reports], Path(args.out))
            for row in table:
                print(
                    f"{row['config']:>16}: f1={row['f1_mean']:.4f} net={row['network_mb']:.2f}MB "
                    f"ctrl={row['ctrl_overhead_pct']:.2f}% dir={row['direction']}"
                )
            return 0
        if args.command == "validate":
            cfg, _ = _load_config(args.config)
            cfg.validate()
            print(f"ok: {cfg.name} ({cfg.nodes} nodes, {cfg.rounds} rounds, {cfg.security.value})")
            return 0
        if args.command == "scenarios":
            for name in bundled_scenarios():
                print(name)
            return 0
        if args.command == "node":
            return _run_node(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except ComparisonError as exc:
        print(f"comparison failed: {exc}", file=sys.stderr)
        return 2
    return 0


def _run_node(args) -> int:
    from dataclasses import replace

    from .fabric import PeerAddress
    from .runner import run_node_tcp

    cfg, _ = _load_config(args.config)
    if args.security is not None:
        cfg = replace(cfg, security=SecuritySetting(args.security))
    if args.role is not None:
        roles = tuple(r for r in cfg.roles if r[0] != args.node_id) + ((args.node_id, Role(args.role)),)
        cfg = replace(cfg, roles=tuple(sorted(roles)))
    cfg.validate()
    return run_node_tcp(
        scenario=cfg,
        node_id=args.node_id,
        listen=PeerAddress.parse(args.listen),
        controller_addr=PeerAddress.parse(args.controller),
        controller_public_pem=Path(args.controller_key).read_bytes(),
        rotation_base=args.rotation_base,
    )


if __name__ == "__main__":
    raise SystemExit(main())
