"""``soaguard`` command: init a deployment, run Server 1 (gateway) or Server 2 (store)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import GatewayConfig
from .deploy import init_deployment
from .gateway import Gateway, GatewayHTTPServer
from .store import RecordFile
from .storenet import StoreServer, parse_address

log = logging.getLogger("soaguard")


def _cmd_init(args: argparse.Namespace) -> int:
    conf = init_deployment(
        args.directory,
        sim_clock=args.sim_clock,
        listen=args.listen,
        store_profile=args.profile,
        store_address=args.store_address,
    )
    print(f"wrote {conf}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    cfg = GatewayConfig.load(args.config)
    if args.listen:
        cfg = cfg.replace(listen=args.listen)
    gateway = Gateway.from_config(cfg)
    server = GatewayHTTPServer(
        gateway,
        parse_address(cfg.listen),
        sim_clock=cfg.sim_clock,
        trust_forwarded_for=cfg.trust_forwarded_for,
    )
    log.info("gateway listening on %s (store profile %s)", server.url, cfg.store_profile)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        gateway.close()
    return 0


def _cmd_store_server(args: argparse.Namespace) -> int:
    if args.config:
        cfg = GatewayConfig.load(args.config)
        path, address = cfg.store_path, cfg.store_address
    else:
        path, address = None, None
    path = Path(args.path) if args.path else path
    address = args.listen or address or "127.0.0.1:8090"
    if path is None:
        print("store-server needs --path or a config with store.path", file=sys.stderr)
        return 2
    server = StoreServer(RecordFile(path), parse_address(address))
    log.info("store server on %s holding %s", server.address, path)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soaguard", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create keys, credentials, rules and gateway.conf")
    p.add_argument("directory")
    p.add_argument("--sim-clock", action="store_true", help="accept X-Sim-Time / X-Forwarded-For headers")
    p.add_argument("--listen", default="127.0.0.1:8080")
    p.add_argument("--profile", choices=("single-process", "two-process"), default="single-process")
    p.add_argument("--store-address", default="127.0.0.1:8090")
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("serve", help="run the gateway (Server 1)")
    p.add_argument("--config", required=True)
    p.add_argument("--listen")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("store-server", help="run the encrypted store (Server 2)")
    p.add_argument("--config")
    p.add_argument("--path")
    p.add_argument("--listen")
    p.set_defaults(func=_cmd_store_server)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
