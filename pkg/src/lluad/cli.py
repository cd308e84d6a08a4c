"""Operator command line.

Subcommands: `server` and `client` run the two daemons, `sim` runs the
trace-driven experiments, `trace gen` writes synthetic query traces,
`list inspect` pretty-prints a serialized list, `plotdata` emits a batch
of figure-ready CSVs, and `keygen` mints a curve keypair for registry
files.  Values resolve as flags > config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import socket
import sys
import time
from pathlib import Path
from random import Random

from .client import (
    DEFAULT_DNS_PORT,
    FALLBACK_RELAY_HOPS,
    LluadClient,
    make_fallback,
)
from .config import load_config, parse_bool, parse_hostport, resolve
from .curve import encode_element, mult_base, random_scalar
from .dnsmsg import RecordType
from .maintenance import Maintainer, MaintenanceConfig, PlainUdpUpstream
from .poplist import (
    CnameSlot,
    InlineSlot,
    MAGIC,
    PoolSlot,
    PopularityList,
    build_list,
    deserialize,
    record_count,
    serialize,
)
from .server import ClientRegistry, LluadServer
from .simharness import (
    BandwidthConfig,
    DEFAULT_LATENCY_MS,
    HitRatioConfig,
    analytic_latency_ms,
    exposure_curve,
    fit_overlap,
    mode_exposure_params,
    run_bandwidth,
    run_latency,
    sweep_hit_ratio,
    write_bandwidth_csv,
    write_exposure_csv,
    write_hit_ratio_csv,
    write_latency_csv,
    write_manifest,
)
from .traces import (
    QueryTrace,
    SyntheticUniverse,
    UniverseConfig,
    ZipfGeneratorConfig,
    generate_trace,
    load_trace_csv,
    write_trace_csv,
)
from .wire import decode_list_snapshot


class UsageError(Exception):
    """Bad flag combination or missing required value."""


# field-calibrated operating point; config files and flags override
DEFAULTS = {
    "n_popular": 25_000,
    "t_refresh": 3600,
    "quota": 10,
    "voting_rate": 0.3,
    "n_shuffle": 10,
    "min_ttl": 60,
    "fast_start": 18,
}


def _ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {text!r}")


def _load_cfg(args) -> dict:
    return load_config(args.config) if getattr(args, "config", None) else {}


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"missing {flag}")
    return value


def _out_path(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


# -- key material ---------------------------------------------------------------


def _cmd_keygen(args) -> int:
    rng = Random(("keygen", args.seed).__repr__()) if args.seed is not None else None
    priv = random_scalar(rng)
    pub = encode_element(mult_base(priv))
    line = f"{priv:064x} {pub.hex()}\n"
    if args.out:
        Path(args.out).write_text(line, encoding="utf-8")
    else:
        sys.stdout.write(line)
    return 0


# -- daemons ----------------------------------------------------------------------


def _universe_from(args, cfg, seed: int) -> SyntheticUniverse:
    size = resolve("universe", args.universe, cfg, None, int)
    return SyntheticUniverse(
        UniverseConfig(
            size=_require(size, "--universe"),
            seed=seed,
            lb_fraction=resolve("lb_fraction", args.lb_fraction, cfg, 0.02, float),
            cname_fraction=resolve(
                "cname_fraction", args.cname_fraction, cfg, 0.05, float
            ),
        )
    )


def _maintenance_config(args, cfg) -> MaintenanceConfig:
    return MaintenanceConfig(
        n_popular=resolve("n_popular", args.n_popular, cfg, DEFAULTS["n_popular"], int),
        t_refresh=resolve("t_refresh", args.t_refresh, cfg, DEFAULTS["t_refresh"], int),
        voting_rate=resolve(
            "voting_rate", args.voting_rate, cfg, DEFAULTS["voting_rate"], float
        ),
        max_votes_per_round=resolve(
            "max_votes", args.max_votes, cfg, DEFAULTS["quota"], int
        ),
        min_ttl=resolve("min_ttl", args.min_ttl, cfg, DEFAULTS["min_ttl"], int),
        fast_start_rounds=resolve(
            "fast_start", args.fast_start, cfg, DEFAULTS["fast_start"], int
        ),
    )


def _cmd_server(args) -> int:
    cfg = _load_cfg(args)
    seed = resolve("seed", args.seed, cfg, 0, int)
    registry = ClientRegistry.load(
        _require(resolve("registry", args.registry, cfg, None), "--registry")
    )
    server_priv = int(_require(resolve("key", args.key, cfg, None), "--key"), 16)

    upstream_addr = resolve("upstream", args.upstream, cfg, None)
    universe_size = resolve("universe", args.universe, cfg, None, int)
    if (upstream_addr is None) == (universe_size is None):
        raise UsageError("pick exactly one of --upstream and --universe")
    universe = None
    if upstream_addr is not None:
        upstream = PlainUdpUpstream(parse_hostport(upstream_addr, 53))
    else:
        universe = _universe_from(args, cfg, seed)
        upstream = universe.upstream(clock=time.time)

    maintainer = Maintainer(
        _maintenance_config(args, cfg), upstream, rng=Random(("server", seed).__repr__())
    )
    if args.prepopulate:
        if universe is None:
            raise UsageError("--prepopulate only works with --universe")
        maintainer.ingest_votes(universe.keys)
        maintainer.run_refresh(time.time())

    server = LluadServer(
        registry,
        maintainer,
        server_priv,
        host=resolve("host", args.host, cfg, "127.0.0.1"),
        port=resolve("port", args.port, cfg, 5853, int),
        quota=resolve("quota", args.quota, cfg, DEFAULTS["quota"], int),
        n_shuffle=resolve("n_shuffle", args.n_shuffle, cfg, DEFAULTS["n_shuffle"], int),
        straggler_timeout=resolve(
            "straggler_timeout", args.straggler_timeout, cfg, 10.0, float
        ),
    )
    server.start()
    host, port = server.address
    print(f"listening on {host}:{port}, {len(registry.entries)} registered", flush=True)
    try:
        server.run_forever(maintainer.cfg.t_refresh)
    finally:
        server.stop()
    return 0


def _cmd_client(args) -> int:
    cfg = _load_cfg(args)
    registry = ClientRegistry.load(
        _require(resolve("registry", args.registry, cfg, None), "--registry")
    )
    server_pub = bytes.fromhex(
        _require(resolve("server_pub", args.server_pub, cfg, None), "--server-pub")
    )
    server_addr = parse_hostport(
        _require(resolve("server", args.server, cfg, None), "--server"), 5853
    )

    shuffler_key = resolve("shuffler_key", args.shuffler_key, cfg, None)
    fallback_mode = resolve("fallback", args.fallback, cfg, None)
    fallback = None
    if fallback_mode == "plain":
        endpoint = _require(
            resolve("fallback_endpoint", args.fallback_endpoint, cfg, None),
            "--fallback-endpoint",
        )
        fallback = make_fallback("plain", endpoint=parse_hostport(endpoint, 53))
    elif fallback_mode == "doh":
        url = _require(
            resolve("fallback_url", args.fallback_url, cfg, None), "--fallback-url"
        )
        fallback = make_fallback("doh", url=url)
    elif fallback_mode is not None:
        raise UsageError(f"no live transport for fallback mode {fallback_mode!r}")

    client = LluadClient(
        _require(resolve("id", args.id, cfg, None), "--id"),
        _require(resolve("token", args.token, cfg, None), "--token"),
        server_addr,
        shuffler_pubs=registry.shuffler_pubs(),
        server_pub=server_pub,
        shuffler_index=resolve("shuffler_index", args.shuffler_index, cfg, None, int),
        shuffler_priv=int(shuffler_key, 16) if shuffler_key is not None else None,
        quota=resolve("quota", args.quota, cfg, DEFAULTS["quota"], int),
        voting_rate=resolve(
            "voting_rate", args.voting_rate, cfg, DEFAULTS["voting_rate"], float
        ),
        min_ttl=resolve("min_ttl", args.min_ttl, cfg, DEFAULTS["min_ttl"], int),
        fallback=fallback,
    )
    client.connect()
    listen_host, listen_port = parse_hostport(
        resolve("listen", args.listen, cfg, f"127.0.0.1:{DEFAULT_DNS_PORT}"),
        DEFAULT_DNS_PORT,
    )
    bound = client.start_dns_listener(listen_host, listen_port)
    print(f"resolving on {bound[0]}:{bound[1]} udp", flush=True)
    try:
        while True:
            time.sleep(3600)
    finally:
        client.close()
    return 0


# -- traces -------------------------------------------------------------------------


def _trace_config(args, cfg, universe_size: int, seed: int) -> ZipfGeneratorConfig:
    return ZipfGeneratorConfig(
        universe=universe_size,
        exponent=resolve("zipf", args.zipf, cfg, 1.0, float),
        clients=resolve("clients", args.clients, cfg, 100, int),
        queries_per_client_hour=resolve("queries", args.queries, cfg, 50, int),
        hours=resolve("hours", args.hours, cfg, 24, int),
        churn_rate=resolve("churn", args.churn, cfg, 0.0, float),
        seed=seed,
        start_ts=resolve("start_ts", args.start_ts, cfg, 0, int),
    )


def _cmd_trace_gen(args) -> int:
    cfg = _load_cfg(args)
    seed = resolve("seed", args.seed, cfg, 0, int)
    if args.universe is None:
        args.universe = resolve("universe", None, cfg, 100_000, int)
    universe = _universe_from(args, cfg, seed)
    trace_cfg = _trace_config(args, cfg, universe.config.size, seed)
    trace = generate_trace(trace_cfg, universe)
    out = _out_path(args, "trace.csv")
    write_trace_csv(trace, str(out))
    print(
        f"{out}: {len(trace.events)} events, {len(trace.clients)} clients, "
        f"{trace_cfg.hours}h over {universe.config.size} names"
    )
    return 0


# -- simulations ------------------------------------------------------------------


def _sim_trace(args, cfg, seed: int) -> tuple[SyntheticUniverse, QueryTrace]:
    if args.universe is None:
        args.universe = resolve("universe", None, cfg, 100_000, int)
    universe = _universe_from(args, cfg, seed)
    if args.trace:
        return universe, load_trace_csv(args.trace)
    return universe, generate_trace(
        _trace_config(args, cfg, universe.config.size, seed), universe
    )


def _cmd_sim_hit_ratio(args) -> int:
    cfg = _load_cfg(args)
    seed = resolve("seed", args.seed, cfg, 0, int)
    universe, trace = _sim_trace(args, cfg, seed)
    n_values = resolve("n_popular", args.n_popular, cfg, [DEFAULTS["n_popular"]], _ints)
    base = HitRatioConfig(
        n_popular=n_values[0],
        voting_rate=resolve(
            "voting_rate", args.voting_rate, cfg, DEFAULTS["voting_rate"], float
        ),
        max_votes_per_round=resolve(
            "max_votes", args.max_votes, cfg, DEFAULTS["quota"], int
        ),
        fast_start_hours=resolve(
            "fast_start", args.fast_start, cfg, DEFAULTS["fast_start"], int
        ),
        freeze_votes_after=resolve("freeze_after", args.freeze_after, cfg, None, int),
        voter_cap=resolve("voter_cap", args.voter_cap, cfg, None, int),
        browser_cache=args.browser_cache,
        seed=seed,
    )
    series = sweep_hit_ratio(trace, universe, n_values, base)
    out = _out_path(args, "hit_ratio.csv")
    write_hit_ratio_csv(series, out)
    for n in sorted(series):
        rows = series[n]
        tail = rows[-min(3, len(rows)) :]
        steady = sum(r.hit_ratio for r in tail) / len(tail)
        print(f"N={n}: steady hit ratio {steady:.4f} over last {len(tail)}h")
    print(f"wrote {out}")
    return 0


def _cmd_sim_exposure(args) -> int:
    cfg = _load_cfg(args)
    modes = resolve(
        "modes", args.modes, cfg, sorted(FALLBACK_RELAY_HOPS), lambda t: t.split(",")
    )
    miss = resolve("miss_fraction", args.miss_fraction, cfg, 0.056, float)
    vote = resolve("vote_fraction", args.vote_fraction, cfg, 0.157, float)
    overlap = resolve("overlap", args.overlap, cfg, 0.0, float)
    fit_target = resolve("fit_exposure", args.fit_exposure, cfg, None, float)
    if fit_target is not None:
        overlap = fit_overlap(miss, vote, fit_target)
    collusions = resolve(
        "collusion", args.collusion, cfg, [i / 20 for i in range(21)], _floats
    )
    extra = {}
    voters = resolve("voters", args.voters, cfg, None, int)
    if voters is not None:
        extra["voters"] = voters
    curves = {
        mode: exposure_curve(
            mode_exposure_params(
                mode,
                miss_fraction=miss,
                vote_fraction=vote,
                overlap=overlap,
                mix_hops=resolve("mix_hops", args.mix_hops, cfg, 10, int),
                **extra,
            ),
            collusions,
        )
        for mode in modes
    }
    out = _out_path(args, "exposure.csv")
    write_exposure_csv(curves, out)
    print(f"wrote {out}: {len(curves)} modes x {len(collusions)} collusion points")
    return 0


def _cmd_sim_bandwidth(args) -> int:
    cfg = _load_cfg(args)
    seed = resolve("seed", args.seed, cfg, 0, int)
    if args.universe is None:
        args.universe = resolve("universe", None, cfg, 2000, int)
    if args.lb_fraction is None:
        args.lb_fraction = resolve("lb_fraction", None, cfg, 0.3, float)
    universe = _universe_from(args, cfg, seed)
    bw_cfg = BandwidthConfig(
        hours=resolve("hours", args.hours, cfg, 2, int),
        clients=resolve("clients", args.clients, cfg, 1, int),
        participate=not args.no_participate,
        quota=resolve("quota", args.quota, cfg, DEFAULTS["quota"], int),
        n_shuffle=resolve("n_shuffle", args.n_shuffle, cfg, DEFAULTS["n_shuffle"], int),
        ttl_step=resolve("ttl_step", args.ttl_step, cfg, 60.0, float),
        n_popular=resolve(
            "n_popular", args.n_popular, cfg, DEFAULTS["n_popular"], int
        ),
        fallback_mode=resolve("fallback", args.fallback, cfg, "doh"),
        seed=seed,
    )
    trace = load_trace_csv(args.trace) if args.trace else None
    report = run_bandwidth(universe, bw_cfg, trace)
    out = _out_path(args, "bandwidth.csv")
    write_bandwidth_csv(report, out)
    total = report.broadcast_bytes
    print(
        f"wrote {out}: {len(report.hours)}h, broadcast {total} B, "
        f"{total / max(1, len(report.hours)) / 1024:.1f} KiB/h per client"
    )
    return 0


def _read_hit_series(path: str, n_popular: int | None) -> list[float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{path} holds no hit-ratio rows")
    if n_popular is None:
        n_popular = max(int(row["n_popular"]) for row in rows)
    series = [
        float(row["hit_ratio"]) for row in rows if int(row["n_popular"]) == n_popular
    ]
    if not series:
        raise UsageError(f"{path} has no rows for N={n_popular}")
    return series


def _cmd_sim_latency(args) -> int:
    cfg = _load_cfg(args)
    seed = resolve("seed", args.seed, cfg, 0, int)
    mode = _require(resolve("mode", args.mode, cfg, None), "--mode")
    if args.from_csv:
        series = _read_hit_series(args.from_csv, args.n_popular)
    else:
        series = resolve("hit", args.hit, cfg, None, _floats)
        if series is None:
            raise UsageError("need --hit values or --from-csv")
    rows = run_latency(
        series,
        mode,
        samples=resolve("samples", args.samples, cfg, 1000, int),
        seed=seed,
    )
    out = _out_path(args, "latency.csv")
    write_latency_csv(rows, out)
    mean = sum(r.mean_ms for r in rows) / len(rows)
    print(f"wrote {out}: mode {mode}, mean {mean:.1f} ms over {len(rows)} hours")
    return 0


# -- list inspection ----------------------------------------------------------------


def _answer_text(rtype: RecordType, data: bytes) -> str:
    if rtype == RecordType.A and len(data) == 4:
        return socket.inet_ntop(socket.AF_INET, data)
    if rtype == RecordType.AAAA and len(data) == 16:
        return socket.inet_ntop(socket.AF_INET6, data)
    return f"{len(data)}B 0x{data.hex()}"


def _slot_text(plist: PopularityList, slot) -> str:
    if isinstance(slot, InlineSlot):
        answer = slot.answer
        return f"{answer.rtype.name} {_answer_text(answer.rtype, answer.data)}"
    if isinstance(slot, PoolSlot):
        group = plist.pool.groups[slot.entry_index]
        return (
            f"{group.key.rtype.name} pool[{slot.entry_index}] "
            f"{len(group.answers)} answers, active #{group.current_index}"
        )
    if isinstance(slot, CnameSlot):
        return f"CNAME -> {slot.target}"
    return repr(slot)


def _render_list(plist: PopularityList, max_nodes: int, max_groups: int) -> str:
    lines = [
        f"generation {plist.generation}: {record_count(plist)} records, "
        f"{len(plist.pool.groups)} pool groups"
    ]
    shown = 0
    hidden = 0

    def walk(node, depth: int) -> None:
        nonlocal shown, hidden
        if shown >= max_nodes:
            hidden += 1
        else:
            shown += 1
            slots = "; ".join(_slot_text(plist, s) for s in node.slots)
            suffix = f"  [{slots}]" if slots else ""
            lines.append("  " * depth + ".".join(node.labels) + suffix)
        for child in node.children:
            walk(child, depth + 1)

    for root in plist.roots:
        walk(root, 1)
    if hidden:
        lines.append(f"  ... {hidden} more nodes")
    if plist.pool.groups:
        lines.append("pool:")
        for i, group in enumerate(plist.pool.groups[:max_groups]):
            lines.append(
                f"  [{i}] {group.key.name} {group.key.rtype.name}: "
                f"{len(group.answers)} answers, active #{group.current_index}"
            )
        if len(plist.pool.groups) > max_groups:
            lines.append(f"  ... {len(plist.pool.groups) - max_groups} more groups")
    return "\n".join(lines) + "\n"


def _cmd_list_inspect(args) -> int:
    data = Path(args.snapshot).read_bytes()
    if data[:4] == MAGIC:
        plist = deserialize(data)
    elif len(data) >= 12 and data[8:12] == MAGIC:
        # snapshot frame body: 8-byte generation, then the list format
        plist = decode_list_snapshot(data)
    else:
        raise UsageError(f"{args.snapshot} is not a serialized list")
    report = _render_list(plist, args.max_nodes, args.max_groups)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    else:
        sys.stdout.write(report)
    return 0


# -- figure batch -------------------------------------------------------------------


def _cmd_plotdata(args) -> int:
    cfg = _load_cfg(args)
    seed = resolve("seed", args.seed, cfg, 0, int)
    out_dir = Path(args.out) if args.out else Path("plotdata")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.universe is None:
        args.universe = resolve("universe", None, cfg, 20_000, int)
    if args.hours is None:
        args.hours = resolve("hours", None, cfg, 12, int)
    universe = _universe_from(args, cfg, seed)
    trace_cfg = _trace_config(args, cfg, universe.config.size, seed)
    trace = generate_trace(trace_cfg, universe)

    n_values = resolve(
        "n_popular", args.n_popular, cfg, [100, 1000, 5000, 10000], _ints
    )
    base = HitRatioConfig(
        n_popular=n_values[0],
        max_votes_per_round=resolve("max_votes", args.max_votes, cfg, 20, int),
        fast_start_hours=trace_cfg.hours,
        seed=seed,
    )
    series = sweep_hit_ratio(trace, universe, n_values, base)
    write_hit_ratio_csv(series, out_dir / "hit_ratio.csv")

    top_rows = series[max(n_values)]
    with open(out_dir / "voter_participation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "queries", "votes", "vote_fraction"])
        for row in top_rows:
            frac = row.votes / row.queries if row.queries else 0.0
            writer.writerow([row.hour, row.queries, row.votes, f"{frac:.6f}"])

    tail = top_rows[-min(3, len(top_rows)) :]
    steady_hit = sum(r.hit_ratio for r in tail) / len(tail)
    miss = 1.0 - steady_hit
    vote_frac = sum(r.votes for r in tail) / max(1, sum(r.queries for r in tail))

    collusions = [i / 20 for i in range(21)]
    curves = {
        mode: exposure_curve(
            mode_exposure_params(mode, miss_fraction=miss, vote_fraction=vote_frac),
            collusions,
        )
        for mode in sorted(FALLBACK_RELAY_HOPS)
    }
    write_exposure_csv(curves, out_dir / "exposure.csv")

    with open(out_dir / "latency.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "hit_ratio", "analytic_ms", "sampled_ms"])
        for mode in sorted(DEFAULT_LATENCY_MS):
            if mode == "local_hit" or mode == "local_miss":
                continue
            sampled = run_latency([steady_hit], mode, seed=seed)[0].mean_ms
            writer.writerow(
                [
                    mode,
                    f"{steady_hit:.6f}",
                    f"{analytic_latency_ms(steady_hit, mode):.3f}",
                    f"{sampled:.3f}",
                ]
            )

    bw_universe = SyntheticUniverse(
        UniverseConfig(2000, seed=seed, lb_fraction=0.35, cname_fraction=0.05)
    )
    report = run_bandwidth(
        bw_universe, BandwidthConfig(hours=3, clients=2, n_popular=2000, seed=seed)
    )
    write_bandwidth_csv(report, out_dir / "bandwidth.csv")

    with open(out_dir / "listsize.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_records", "raw_bytes", "compressed_bytes", "ratio"])
        for n in n_values:
            plist = build_list(universe.record_defs(n))
            raw = len(serialize(plist))
            packed = len(serialize(plist, compress=True))
            writer.writerow([n, raw, packed, f"{packed / raw:.6f}"])

    write_manifest(
        out_dir / "manifest.json",
        trace_cfg,
        seed,
        universe_size=universe.config.size,
        n_values=n_values,
        steady_hit=steady_hit,
        miss_fraction=miss,
        vote_fraction=vote_frac,
    )
    print(f"wrote {out_dir}/: hit_ratio, voter_participation, exposure,")
    print("  latency, bandwidth, listsize CSVs and manifest.json")
    return 0


# -- argument wiring ---------------------------------------------------------------


def _add_universe_flags(p) -> None:
    p.add_argument("--universe", type=int, help="synthetic name-universe size")
    p.add_argument("--lb-fraction", type=float)
    p.add_argument("--cname-fraction", type=float)


def _add_trace_flags(p) -> None:
    p.add_argument("--zipf", type=float, help="popularity exponent")
    p.add_argument("--clients", type=int)
    p.add_argument("--queries", type=int, help="queries per client-hour")
    p.add_argument("--hours", type=int)
    p.add_argument("--churn", type=float, help="rank permutation rate per day")
    p.add_argument("--start-ts", type=int)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="output path (file, or directory for plotdata)")

    parser = argparse.ArgumentParser(prog="lluad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", parents=[common], help="mint a curve keypair")
    p.set_defaults(func=_cmd_keygen)

    p = sub.add_parser("server", parents=[common], help="run the list server daemon")
    p.add_argument("--registry", help="client credential file")
    p.add_argument("--key", help="server private scalar, hex")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--upstream", help="recursive resolver host:port")
    _add_universe_flags(p)
    p.add_argument("--prepopulate", action="store_true")
    p.add_argument("--n-popular", type=int)
    p.add_argument("--t-refresh", type=int)
    p.add_argument("--quota", type=int)
    p.add_argument("--max-votes", type=int)
    p.add_argument("--n-shuffle", type=int)
    p.add_argument("--voting-rate", type=float)
    p.add_argument("--min-ttl", type=int)
    p.add_argument("--fast-start", type=int)
    p.add_argument("--straggler-timeout", type=float)
    p.set_defaults(func=_cmd_server)

    p = sub.add_parser("client", parents=[common], help="run the resolver daemon")
    p.add_argument("--id")
    p.add_argument("--token")
    p.add_argument("--server", help="list server host:port")
    p.add_argument("--server-pub", help="server public element, hex")
    p.add_argument("--registry", help="credential file for shuffler public keys")
    p.add_argument("--listen", help="stub resolver udp host:port")
    p.add_argument("--fallback", choices=["plain", "doh"])
    p.add_argument("--fallback-endpoint", help="plain-udp resolver host:port")
    p.add_argument("--fallback-url", help="doh endpoint url")
    p.add_argument("--shuffler-index", type=int)
    p.add_argument("--shuffler-key", help="shuffler private scalar, hex")
    p.add_argument("--quota", type=int)
    p.add_argument("--voting-rate", type=float)
    p.add_argument("--min-ttl", type=int)
    p.set_defaults(func=_cmd_client)

    trace = sub.add_parser("trace", help="trace tools")
    trace_sub = trace.add_subparsers(dest="trace_command", required=True)
    p = trace_sub.add_parser("gen", parents=[common], help="write a synthetic trace")
    _add_universe_flags(p)
    _add_trace_flags(p)
    p.set_defaults(func=_cmd_trace_gen)

    sim = sub.add_parser("sim", help="run experiments")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)

    p = sim_sub.add_parser("hit-ratio", parents=[common])
    p.add_argument("--n-popular", type=_ints, help="comma-separated list sizes")
    _add_universe_flags(p)
    _add_trace_flags(p)
    p.add_argument("--trace", help="replay this CSV instead of generating")
    p.add_argument("--voting-rate", type=float)
    p.add_argument("--max-votes", type=int)
    p.add_argument("--fast-start", type=int)
    p.add_argument("--freeze-after", type=int, help="stop voting after this hour")
    p.add_argument("--voter-cap", type=int)
    p.add_argument("--browser-cache", action="store_true")
    p.set_defaults(func=_cmd_sim_hit_ratio)

    p = sim_sub.add_parser("exposure", parents=[common])
    p.add_argument("--modes", help="comma-separated fallback modes")
    p.add_argument("--miss-fraction", type=float)
    p.add_argument("--vote-fraction", type=float)
    p.add_argument("--overlap", type=float)
    p.add_argument("--fit-exposure", type=float, help="solve overlap for this rate at full collusion")
    p.add_argument("--collusion", type=_floats, help="comma-separated fractions")
    p.add_argument("--voters", type=int, help="finite anonymity-set size")
    p.add_argument("--mix-hops", type=int)
    p.set_defaults(func=_cmd_sim_exposure)

    p = sim_sub.add_parser("bandwidth", parents=[common])
    _add_universe_flags(p)
    p.add_argument("--hours", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--no-participate", action="store_true")
    p.add_argument("--quota", type=int)
    p.add_argument("--n-shuffle", type=int)
    p.add_argument("--n-popular", type=int)
    p.add_argument("--ttl-step", type=float)
    p.add_argument("--fallback", choices=sorted(FALLBACK_RELAY_HOPS))
    p.add_argument("--trace", help="drive fallback misses from this CSV")
    p.set_defaults(func=_cmd_sim_bandwidth)

    p = sim_sub.add_parser("latency", parents=[common])
    p.add_argument("--mode")
    p.add_argument("--hit", type=_floats, help="comma-separated hourly hit ratios")
    p.add_argument("--from-csv", help="read hit ratios from a hit-ratio CSV")
    p.add_argument("--n-popular", type=int, help="row filter for --from-csv")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=_cmd_sim_latency)

    lst = sub.add_parser("list", help="list snapshot tools")
    lst_sub = lst.add_subparsers(dest="list_command", required=True)
    p = lst_sub.add_parser("inspect", parents=[common])
    p.add_argument("snapshot", help="serialized list file")
    p.add_argument("--max-nodes", type=int, default=48)
    p.add_argument("--max-groups", type=int, default=12)
    p.set_defaults(func=_cmd_list_inspect)

    p = sub.add_parser(
        "plotdata", parents=[common], help="emit the full figure CSV batch"
    )
    _add_universe_flags(p)
    _add_trace_flags(p)
    p.add_argument("--n-popular", type=_ints)
    p.add_argument("--max-votes", type=int)
    p.set_defaults(func=_cmd_plotdata)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage error, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
