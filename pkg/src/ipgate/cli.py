"""Command line entry points: `ipgate serve|scenario|bench`.

The Squid helper has its own executable (`ipgate-helper`) because Squid execs
it directly; everything else hangs off this command.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, check_config, load_config
from .harness import ScenarioError, bench_latency, parse_scenario, run_scenario
from .netio import TcpServer


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ipgate",
        description="Per-client-IP web access gateway: judged proxy, captive "
                    "login portal, scenario testbench, and latency bench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve", help="run the proxy and login service")
    serve_p.add_argument("--config", required=True, metavar="FILE",
                         help="INI configuration file")
    serve_p.add_argument("--check", action="store_true",
                         help="validate the configuration and exit")

    scenario_p = sub.add_parser("scenario", help="execute a scenario script")
    scenario_p.add_argument("file", metavar="FILE", help="scenario script")

    bench_p = sub.add_parser("bench", help="measure proxy latency overhead")
    bench_p.add_argument("--clients", type=int, default=25)
    bench_p.add_argument("--requests", type=int, default=200,
                         help="requests per client")
    cache = bench_p.add_mutually_exclusive_group()
    cache.add_argument("--warm", dest="warm", action="store_true", default=True,
                       help="keep the auth cache warm (default)")
    cache.add_argument("--cold", dest="warm", action="store_false",
                       help="disable the auth cache: every request hits the store")
    bench_p.add_argument("--body-bytes", type=int, default=2048,
                         help="response body size served by the stub origin")

    args = parser.parse_args(argv)
    if args.command == "serve":
        return _cmd_serve(args)
    if args.command == "scenario":
        return _cmd_scenario(args)
    return _cmd_bench(args)


def _cmd_serve(args: argparse.Namespace) -> int:
    if args.check:
        errors, warnings = check_config(args.config)
        for message in warnings:
            print(f"warning: {message}")
        for message in errors:
            print(f"error: {message}")
        if errors:
            return 1
        print(f"{args.config}: configuration ok")
        return 0

    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for message in cfg.warnings:
        print(f"warning: {message}", file=sys.stderr)
    try:
        backend = cfg.build_backend()
    except Exception as exc:  # credential file problems surface at startup
        print(f"error: cannot load credentials: {exc}", file=sys.stderr)
        return 1
    store = cfg.build_store()
    engine = cfg.build_engine(store)

    from .auth import AuthApp
    from .proxy import ProxyService

    proxy = ProxyService(engine, cfg.proxy.login_url,
                         upstream_timeout=cfg.proxy.upstream_timeout)
    auth = AuthApp(store, backend, cfg.auth_settings(),
                   on_session_change=engine.invalidate_ip)
    proxy_server = TcpServer(proxy.handle_connection, host=cfg.proxy.listen_host,
                             port=cfg.proxy.listen_port, name="proxy")
    auth_server = TcpServer(auth.handle_connection, host=cfg.login.listen_host,
                            port=cfg.login.listen_port, name="login")
    try:
        proxy_server.start()
        auth_server.start()
    except OSError as exc:
        print(f"error: cannot listen: {exc}", file=sys.stderr)
        proxy_server.stop()
        auth_server.stop()
        return 1
    print(f"proxy listening on {cfg.proxy.listen_host}:{proxy_server.address[1]}")
    print(f"login service listening on {cfg.login.listen_host}:{auth_server.address[1]}")
    print("press Ctrl-C to stop")
    try:
        import threading

        threading.Event().wait()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        proxy_server.stop()
        auth_server.stop()
        proxy.close()
    return 0


def _cmd_scenario(args: argparse.Namespace) -> int:
    path = Path(args.file)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        spec = parse_scenario(text, source=str(path))
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    transcript = run_scenario(spec)
    print(transcript.format())
    return 0 if transcript.ok else 1


def _cmd_bench(args: argparse.Namespace) -> int:
    if args.clients < 1 or args.requests < 1 or args.body_bytes < 0:
        print("error: --clients and --requests must be >= 1, --body-bytes >= 0",
              file=sys.stderr)
        return 2
    report = bench_latency(clients=args.clients, requests_per_client=args.requests,
                           warm_cache=args.warm, body_bytes=args.body_bytes)
    print(report.format())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
