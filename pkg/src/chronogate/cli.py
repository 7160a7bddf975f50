"""
Command line entry point.

Exit codes: 0 success, 1 operational error (feed, config, bind),
2 usage error, 3 ``check`` verdict is Block.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, read_kv_file, resolve_config_path
from .domain_age import AgeIndex, EmptyFeed, FeedRowError, format_timestamp, load_feed, lookup_age, parse_timestamp
from .policy import Action, PolicyConfig, evaluate, parse_action

EXIT_OK = 0
EXIT_OPERATIONAL = 1
EXIT_USAGE = 2
EXIT_BLOCK = 3

log = logging.getLogger("chronogate")


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _usage(message: str) -> CliError:
    return CliError(message, EXIT_USAGE)


def _operational(message: str) -> CliError:
    return CliError(message, EXIT_OPERATIONAL)


def _parse_at(text: Optional[str]) -> Optional[dt.datetime]:
    if text is None:
        return None
    try:
        return parse_timestamp(text)
    except FeedRowError as exc:
        raise _usage(f"--at: {exc}") from None


def _file_values(args) -> tuple[dict, Optional[Path]]:
    path = resolve_config_path(getattr(args, "config", None))
    if path is None:
        return {}, None
    try:
        return read_kv_file(path), Path(path).parent
    except ConfigError as exc:
        raise _operational(str(exc)) from None


def _policy(args, values: dict, base_dir: Optional[Path]) -> PolicyConfig:
    try:
        policy = PolicyConfig.from_mapping(values, base_dir)
    except ConfigError as exc:
        raise _operational(f"config: {exc}") from None
    try:
        if getattr(args, "threshold_hours", None) is not None:
            policy = policy.with_threshold_hours(args.threshold_hours)
        if getattr(args, "young_action", None) is not None:
            policy = replace(policy, young_action=parse_action(args.young_action, "--young-action"))
    except ConfigError as exc:
        raise _usage(str(exc)) from None
    return policy


# -- serve -------------------------------------------------------------------------


def cmd_serve(args) -> int:
    from .resolver_proxy import DnsProxyServer, ProxyConfig, StartupError, parse_endpoint

    values, base_dir = _file_values(args)
    policy = _policy(args, values, base_dir)
    try:
        ProxyConfig.from_mapping(values, base_dir)
    except ConfigError as exc:
        raise _operational(f"config: {exc}") from None
    try:
        overrides = {
            "policy": policy,
            "listen": parse_endpoint(args.listen) if args.listen else None,
            "upstream": parse_endpoint(args.upstream) if args.upstream else None,
            "feed_path": args.feed,
            "log_path": args.log,
            "blocklist_dir": args.blocklist_dir,
            "feed_reload_minutes": args.feed_reload_minutes,
            "allow_empty_feed": True if args.allow_empty_feed else None,
            "soa_probe_enabled": False if args.no_soa_probe else None,
        }
        config = ProxyConfig.from_mapping(values, base_dir, **overrides)
    except ConfigError as exc:
        raise _usage(str(exc)) from None
    server = DnsProxyServer(config)
    try:
        host, port = server.start()
    except StartupError as exc:
        raise _operational(str(exc)) from None
    print(f"chronogate listening on {host}:{port}, upstream {config.upstream[0]}:{config.upstream[1]}", flush=True)
    server.serve_forever()
    return EXIT_OK


# -- check -------------------------------------------------------------------------


def cmd_check(args) -> int:
    values, base_dir = _file_values(args)
    policy = _policy(args, values, base_dir)
    now = _parse_at(args.at) or dt.datetime.now(dt.timezone.utc).replace(microsecond=0)
    feed = args.feed or values.get("feed_path")
    if feed and base_dir is not None and not args.feed and not Path(feed).is_absolute():
        feed = str(base_dir / feed)
    index = AgeIndex()
    if feed:
        try:
            index = load_feed(feed, now)
        except (OSError, EmptyFeed, UnicodeDecodeError) as exc:
            raise _operational(f"cannot load feed {feed}: {exc}") from None
    domain = args.domain.strip().lower().rstrip(".")
    verdict = lookup_age(domain, now, index)
    decision = evaluate(domain, verdict, policy)
    print(json.dumps({
        "domain": domain,
        "at": format_timestamp(now),
        "age": verdict.as_dict(),
        "policy": decision.as_dict(),
    }, sort_keys=True))
    return EXIT_BLOCK if decision.action is Action.BLOCK else EXIT_OK


# -- simulate ----------------------------------------------------------------------


def _parse_hours_list(text: str) -> list[dt.timedelta]:
    try:
        return [dt.timedelta(hours=float(x)) for x in text.split(",") if x.strip()]
    except ValueError:
        raise _usage(f"--lead-times: expected comma-separated hours, got {text!r}") from None


def cmd_simulate(args) -> int:
    from . import dga_lab

    values: dict = {}
    base_dir = None
    if args.scenario:
        try:
            values = read_kv_file(args.scenario)
        except ConfigError as exc:
            raise _operational(str(exc)) from None
        base_dir = Path(args.scenario).parent
    flag_values = {
        "dga": args.dga,
        "domains_per_day": args.domains_per_day,
        "registered": args.registered,
        "queries": args.queries,
        "lead_time_hours": args.lead_time_hours,
        "horizon_days": args.horizon_days,
        "seed": args.seed,
        "dga_seed": args.dga_seed,
        "tld": args.tld,
        "trials": args.trials,
        "threshold_hours": args.threshold_hours,
        "young_action": args.young_action,
        "defense": args.defense,
    }
    at = _parse_at(args.at)
    if at is not None:
        flag_values["start_date"] = at.date().isoformat()
    if values:
        try:
            dga_lab.scenario_from_mapping(values, base_dir)
        except ConfigError as exc:
            raise _operational(f"scenario: {exc}") from None
    merged = dict(values)
    merged.update({k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in flag_values.items() if v is not None})
    try:
        sc, trials = dga_lab.scenario_from_mapping(merged, base_dir)
        if trials < 1:
            raise ConfigError("trials must be at least 1")
    except ConfigError as exc:
        raise _usage(str(exc)) from None

    out = sys.stdout
    if args.tradeoff_hazard is not None:
        leads = _parse_hours_list(args.lead_times)
        try:
            rows = dga_lab.lead_time_tradeoff(sc, args.tradeoff_hazard, leads, trials)
        except ValueError as exc:
            raise _usage(str(exc)) from None
        dga_lab.write_tradeoff_csv(rows, out)
        if args.figure:
            from .plotting import plot_tradeoff

            threshold = None if sc.defense is None else sc.defense.threshold.total_seconds() / 3600
            plot_tradeoff(rows, args.figure, threshold)
        return EXIT_OK

    outcomes = dga_lab.simulate_trials(sc, trials)
    agg = dga_lab.aggregate(outcomes)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            dga_lab.write_outcomes_csv(outcomes, fh, sc.rng_seed)
        prefix = ""
    else:
        dga_lab.write_outcomes_csv(outcomes, out, sc.rng_seed)
        prefix = "# "
    for line in dga_lab.summary_lines(sc, agg):
        print(prefix + line, file=out)
    if args.figure:
        from .plotting import plot_rendezvous

        plot_rendezvous(outcomes, sc.horizon_days, args.figure)
    return EXIT_OK


# -- entropy -----------------------------------------------------------------------


def cmd_entropy(args) -> int:
    from .entropy_guard import classify_stream

    try:
        fh = open(args.path, "rb")
    except OSError as exc:
        raise _operational(f"cannot read {args.path}: {exc}") from None
    try:
        with fh:
            report = classify_stream(fh, threshold=args.threshold, window=args.window)
    except ValueError as exc:
        raise _usage(str(exc)) from None
    print("offset,length,bits_per_byte,flagged")
    for w in report.windows:
        print(f"{w.offset},{w.length},{w.bits_per_byte:.6f},{int(w.flagged)}")
    summary = report.overall.as_dict()
    summary["windows"] = len(report.windows)
    summary["flagged_windows"] = report.flagged_windows
    print(json.dumps(summary, sort_keys=True))
    if args.figure:
        from .plotting import plot_entropy

        plot_entropy(report, args.figure)
    return EXIT_OK


# -- feed validate -----------------------------------------------------------------


def cmd_feed_validate(args) -> int:
    now = _parse_at(args.at) or dt.datetime.now(dt.timezone.utc).replace(microsecond=0)
    try:
        index = load_feed(args.path, now)
        stats = index.stats
        problem = None if stats.header_seen else "missing 'domain,registered_at' header"
    except EmptyFeed as exc:
        index, stats, problem = None, exc.stats, str(exc)
    except (OSError, UnicodeDecodeError) as exc:
        raise _operational(f"cannot read feed {args.path}: {exc}") from None
    result = stats.as_dict()
    result["domains"] = len(index) if index is not None else 0
    result["ok"] = problem is None
    if problem:
        result["problem"] = problem
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK if problem is None else EXIT_OPERATIONAL


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chronogate", description="Delayed-DNS forwarder and DGA rendezvous lab.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the filtering forwarder")
    s.add_argument("--config", help="key = value config file (default: $CHRONOGATE_CONFIG)")
    s.add_argument("--listen", help="address:port to listen on")
    s.add_argument("--upstream", help="upstream resolver address:port")
    s.add_argument("--feed", help="NRD feed CSV")
    s.add_argument("--log", help="JSONL decision log")
    s.add_argument("--blocklist-dir", help="directory for the daily plain-text blocklist")
    s.add_argument("--threshold-hours", type=float)
    s.add_argument("--young-action", choices=["block", "alert"])
    s.add_argument("--feed-reload-minutes", type=float)
    s.add_argument("--allow-empty-feed", action="store_true")
    s.add_argument("--no-soa-probe", action="store_true")
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("check", help="print the verdict for one domain")
    c.add_argument("domain")
    c.add_argument("--config")
    c.add_argument("--feed")
    c.add_argument("--at", help="evaluate at this UTC time instead of now")
    c.add_argument("--threshold-hours", type=float)
    c.add_argument("--young-action", choices=["block", "alert"])
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("simulate", help="run DGA rendezvous trials")
    m.add_argument("--scenario", help="key = value scenario file")
    m.add_argument("--dga", choices=["toy-date", "seeded-hash"])
    m.add_argument("--domains-per-day", type=int)
    m.add_argument("--registered", type=int)
    m.add_argument("--queries", type=int)
    m.add_argument("--lead-time-hours", type=float)
    m.add_argument("--horizon-days", type=int)
    m.add_argument("--threshold-hours", type=float)
    m.add_argument("--young-action", choices=["block", "alert"])
    m.add_argument("--defense", dest="defense", action="store_true", default=None)
    m.add_argument("--no-defense", dest="defense", action="store_false")
    m.add_argument("--seed", type=int)
    m.add_argument("--dga-seed", type=int)
    m.add_argument("--tld")
    m.add_argument("--trials", type=int)
    m.add_argument("--at", help="simulation start date (UTC timestamp)")
    m.add_argument("--csv", help="write per-trial CSV here instead of stdout")
    m.add_argument("--figure", help="render a figure (png/pdf/svg) to this path")
    m.add_argument("--tradeoff-hazard", type=float, help="emit the lead-time tradeoff table with this daily takedown probability")
    m.add_argument("--lead-times", default="1,3,12,24,48,72", help="hours, comma separated (tradeoff mode)")
    m.set_defaults(func=cmd_simulate)

    e = sub.add_parser("entropy", help="per-window Shannon entropy of a file")
    e.add_argument("path")
    e.add_argument("--threshold", type=float, default=7.0)
    e.add_argument("--window", type=int, default=4096)
    e.add_argument("--figure")
    e.set_defaults(func=cmd_entropy)

    f = sub.add_parser("feed", help="feed utilities")
    fsub = f.add_subparsers(dest="feed_command", required=True)
    v = fsub.add_parser("validate", help="check an NRD feed CSV")
    v.add_argument("path")
    v.add_argument("--at", help="ingestion clock (UTC timestamp)")
    v.set_defaults(func=cmd_feed_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"chronogate: error: {exc}", file=sys.stderr)
        return exc.code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
