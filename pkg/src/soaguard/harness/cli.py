"""``harness run``: replay the threat catalog against a gateway and grade it."""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from ..config import GatewayConfig
from .scenarios import DEFAULT_SCENARIOS, SCENARIO_ORDER, Credentials, run_all
from .targets import SimClock, TargetUnreachable, WallClock, open_target

log = logging.getLogger("soaguard.harness")


def _credentials(args: argparse.Namespace, cfg: Optional[GatewayConfig]) -> Credentials:
    client_id = args.client_id or (cfg.harness_client_id if cfg else "harness")
    if args.password_file:
        password_file = Path(args.password_file)
    elif cfg is not None and cfg.harness_password_file is not None:
        password_file = cfg.harness_password_file
    else:
        raise SystemExit("no password for the harness account: pass --password-file or --config")
    return Credentials(client_id, password_file.read_text(encoding="utf-8").strip())


def _cmd_run(args: argparse.Namespace) -> int:
    tmp = None
    if args.config:
        cfg: Optional[GatewayConfig] = GatewayConfig.load(args.config)
    elif args.target == "inproc":
        from ..deploy import init_deployment

        tmp = tempfile.TemporaryDirectory(prefix="harness-deploy-")
        cfg = GatewayConfig.load(init_deployment(tmp.name))
        log.info("no --config given; using a fresh default deployment in %s", tmp.name)
    else:
        cfg = None

    names = list(SCENARIO_ORDER) if args.scenario == "all" else [args.scenario]
    scenarios = []
    for name in names:
        s = DEFAULT_SCENARIOS[name]
        if args.rate is not None:
            s = replace(s, rate=args.rate)
        if args.duration is not None:
            s = replace(s, duration=args.duration)
        if args.clients is not None:
            s = replace(s, clients=args.clients)
        scenarios.append(s)

    clock = SimClock() if args.sim_clock else WallClock()
    admin_token = Path(args.admin_token_file).read_text().strip() if args.admin_token_file else None
    try:
        target = open_target(
            args.target,
            cfg,
            simulated=args.sim_clock,
            store_path=Path(args.store_path) if args.store_path else None,
            admin_token=admin_token,
        )
        try:
            report = run_all(
                target,
                clock,
                _credentials(args, cfg),
                scenarios,
                seed=args.seed,
                workers=args.workers,
                cooldown=args.cooldown,
                expected_threshold=cfg.ids_threshold if cfg else 50,
                window_s=cfg.ids_window_s if cfg else 10,
            )
        finally:
            target.close()
    except TargetUnreachable as exc:
        print(f"target unreachable: {exc}", file=sys.stderr)
        return 2
    finally:
        if tmp is not None:
            tmp.cleanup()

    sys.stdout.write(report.to_text())
    if args.report:
        json_path, text_path = report.write(args.report)
        log.info("report written to %s and %s", json_path, text_path)
    return report.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harness", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one scenario or all of them")
    p.add_argument("--scenario", default="all", choices=("all",) + SCENARIO_ORDER)
    p.add_argument("--target", default="inproc", help="'inproc' or the gateway URL, e.g. http://127.0.0.1:8080")
    p.add_argument("--config", help="gateway.conf of the deployment under test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, help="requests per second (overrides the scenario default)")
    p.add_argument("--duration", type=float, help="seconds of traffic (overrides the scenario default)")
    p.add_argument("--clients", type=int, help="number of distinct client addresses")
    p.add_argument("--workers", type=int, default=1, help="concurrent client workers (real-time mode only)")
    p.add_argument("--report", help="write the JSON report here and a text copy next to it")
    p.add_argument("--sim-clock", action="store_true", help="drive time deterministically instead of sleeping")
    p.add_argument("--cooldown", type=float, default=11.0, help="real-time pause between scenarios")
    p.add_argument("--client-id")
    p.add_argument("--password-file")
    p.add_argument("--admin-token-file")
    p.add_argument("--store-path", help="store file to scan in at_rest_scan (HTTP targets)")
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if not args.verbose:
        # quarantine warnings from an in-process gateway are expected here; the report covers them
        logging.getLogger("soaguard").setLevel(logging.ERROR)
        logging.getLogger("soaguard.harness").setLevel(logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
