"""Synthetic universe and trace generator checks."""

import numpy as np
import pytest

from lluad.dnsmsg import DomainName, RecordKey, RecordType
from lluad.maintenance import UpstreamFailure
from lluad.poplist import build_list, record_count
from lluad.traces import (
    QueryTrace,
    SyntheticUniverse,
    TraceEvent,
    TraceFormatError,
    UniverseConfig,
    ZipfGeneratorConfig,
    generate_trace,
    load_trace_csv,
    write_trace_csv,
    zipf_cdf,
)


def make_universe(size=400, seed=1, **kw):
    return SyntheticUniverse(UniverseConfig(size=size, seed=seed, **kw))


def test_universe_is_deterministic_per_seed():
    a = make_universe(seed=5, lb_fraction=0.1, cname_fraction=0.1)
    b = make_universe(seed=5, lb_fraction=0.1, cname_fraction=0.1)
    c = make_universe(seed=6, lb_fraction=0.1, cname_fraction=0.1)
    assert a.keys == b.keys
    assert a.kind == b.kind
    assert a.keys != c.keys


def test_every_rank_resolves():
    uni = make_universe(lb_fraction=0.1, cname_fraction=0.1)
    for key in uni.keys:
        answer = uni.resolve(key, now=99.0)
        assert answer.answers or answer.cname is not None


def test_unknown_key_raises():
    uni = make_universe()
    with pytest.raises(UpstreamFailure):
        uni.resolve(
            RecordKey(DomainName.from_text("not-in-universe.example.com"), RecordType.A)
        )


def test_cname_chain_reaches_terminal_answer():
    uni = make_universe(cname_fraction=0.2)
    rank = uni.kind.index("cname")
    first = uni.resolve(uni.keys[rank])
    assert first.cname is not None
    target = uni.resolve(RecordKey(first.cname, uni.keys[rank].rtype))
    assert target.answers


def test_cname_link_requeried_under_its_own_type():
    uni = make_universe(cname_fraction=0.2)
    rank = uni.kind.index("cname")
    again = uni.resolve(RecordKey(uni.keys[rank].name, RecordType.CNAME))
    assert again.cname is not None


def test_lb_active_answer_rotates_through_pool():
    uni = make_universe(lb_fraction=0.2)
    rank = uni.kind.index("lb")
    seen = {uni.resolve(uni.keys[rank], now=60.0 * i).answers[0] for i in range(12)}
    assert len(seen) > 1
    assert seen <= set(uni._pools[rank])


def test_record_defs_close_over_cname_targets():
    uni = make_universe(lb_fraction=0.1, cname_fraction=0.2)
    for n in (10, 137, 400):
        plist = build_list(uni.record_defs(n))  # raises if closure broken
        assert record_count(plist) >= min(n, uni.size)


def test_zipf_cdf_shape():
    cdf = zipf_cdf(1000, 1.0)
    assert np.all(np.diff(cdf) > 0)
    assert cdf[-1] == pytest.approx(1.0)


def test_trace_is_deterministic_and_time_ordered():
    uni = make_universe(size=500)
    cfg = ZipfGeneratorConfig(
        universe=500, clients=8, queries_per_client_hour=25, hours=3, seed=4
    )
    a = generate_trace(cfg, uni)
    b = generate_trace(cfg, uni)
    assert a.events == b.events
    stamps = [e.timestamp for e in a.events]
    assert stamps == sorted(stamps)
    assert len(a) == 8 * 25 * 3


def test_trace_hours_buckets_cover_everything():
    uni = make_universe(size=300)
    cfg = ZipfGeneratorConfig(
        universe=300, clients=5, queries_per_client_hour=20, hours=4, seed=2
    )
    trace = generate_trace(cfg, uni)
    per_hour = dict(trace.hours())
    assert sorted(per_hour) == [0, 1, 2, 3]
    assert sum(len(v) for v in per_hour.values()) == len(trace)


def test_empirical_zipf_mass_matches_harmonic_sum():
    # oracle: plain-float harmonic mass of the top 50 ranks
    u, s, top = 2000, 1.0, 50
    total = sum(r**-s for r in range(1, u + 1))
    expect = sum(r**-s for r in range(1, top + 1)) / total
    uni = make_universe(size=u)
    cfg = ZipfGeneratorConfig(
        universe=u, exponent=s, clients=20, queries_per_client_hour=100,
        hours=10, seed=6,
    )
    trace = generate_trace(cfg, uni)
    hits = sum(1 for e in trace.events if uni.rank_of[e.key] < top)
    assert hits / len(trace) == pytest.approx(expect, abs=0.02)


def test_churn_permutes_only_at_day_boundaries():
    uni = make_universe(size=300)
    base = ZipfGeneratorConfig(
        universe=300, clients=6, queries_per_client_hour=30, hours=30,
        churn_rate=0.2, seed=8,
    )
    churned = generate_trace(base, uni)
    import dataclasses

    still = generate_trace(dataclasses.replace(base, churn_rate=0.0), uni)
    first_day = 24 * 6 * 30
    assert churned.events[:first_day] == still.events[:first_day]
    assert churned.events[first_day:] != still.events[first_day:]


def test_generator_config_validation():
    with pytest.raises(ValueError):
        ZipfGeneratorConfig(universe=100, exponent=0.0)
    with pytest.raises(ValueError):
        ZipfGeneratorConfig(universe=100, churn_rate=1.5)
    uni = make_universe(size=50)
    with pytest.raises(ValueError):
        generate_trace(ZipfGeneratorConfig(universe=100), uni)


def test_trace_rejects_time_travel():
    key = RecordKey(DomainName.from_text("a.example.com"), RecordType.A)
    with pytest.raises(TraceFormatError):
        QueryTrace([TraceEvent(100, "c1", key), TraceEvent(99, "c1", key)])


def test_csv_round_trip(tmp_path):
    uni = make_universe(size=200)
    cfg = ZipfGeneratorConfig(
        universe=200, clients=4, queries_per_client_hour=15, hours=2, seed=3
    )
    trace = generate_trace(cfg, uni)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    back = load_trace_csv(path)
    assert back.events == trace.events
    assert back.skipped == 0


def test_csv_skips_malformed_rows(tmp_path):
    path = tmp_path / "rough.csv"
    path.write_text(
        "unix_ts,client_id,qname,qtype\n"
        "100,c1,ok.example.com,A\n"
        "oops,c1,ok.example.com,A\n"
        "100,c1,bad..name,A\n"
        "100,c1,ok.example.com,MX\n"
        "100,c1\n"
        "120,c2,fine.example.org,AAAA\n"
    )
    trace = load_trace_csv(path)
    assert len(trace) == 2
    assert trace.skipped == 4


def test_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("time,who,name,type\n")
    with pytest.raises(TraceFormatError):
        load_trace_csv(path)


def test_tail_names_stay_cheap_against_head():
    # the whole point of the head/tail split: marginal records past the
    # popular head must not grow the serialized list linearly
    from lluad.poplist import serialize

    uni = make_universe(size=6000, seed=11)
    small = len(serialize(build_list(uni.record_defs(2000)), compress=False))
    large = len(serialize(build_list(uni.record_defs(5000)), compress=False))
    assert large / small < 1.75
