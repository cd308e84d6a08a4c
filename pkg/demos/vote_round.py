"""One voting round through the shuffler relay, end to end in process.

Three clients wrap their buffered votes in constant-size packets with
per-hop blinding, the relay walks them through the shuffle stages, and
each client verifies the acknowledgement that came back along the same
path. The tally side never learns who voted for what, and the quota
bounds how much weight any one client can inject.
"""

from random import Random

from lluad.curve import encode_element, mult_base, random_scalar
from lluad.dnsmsg import DomainName, RecordKey, RecordType
from lluad.mixnet import (
    AckOutcome,
    LocalTransport,
    RoundContext,
    RoundServer,
    ShufflerNode,
    client_submit,
    verify_round_acks,
)

N_SHUFFLERS = 8
N_SHUFFLE = 3  # hops per packet
QUOTA = 6


def record(name: str) -> RecordKey:
    return RecordKey(DomainName.from_text(name), RecordType.A)


def main() -> None:
    rng = Random(42)
    node_privs = {j: random_scalar(rng) for j in range(N_SHUFFLERS)}
    nodes = {
        j: ShufflerNode(j, priv, rng=Random(("node", j).__repr__()))
        for j, priv in node_privs.items()
    }
    shuffler_pubs = {
        j: encode_element(mult_base(priv)) for j, priv in node_privs.items()
    }
    server_priv = random_scalar(rng)
    terminal_pub = encode_element(mult_base(server_priv))
    server = RoundServer(server_priv, QUOTA, LocalTransport(nodes))

    wants = {
        "alice": [record("news.example")] * 3 + [record("wiki.example")],
        "bob": [record("news.example")] * 2,
        "carol": [record("video.example")] * 5,
    }
    ctx = RoundContext.for_online(7_000_001, range(N_SHUFFLERS), N_SHUFFLERS, N_SHUFFLE)

    planned = {}
    submissions = {}
    for name, keys in wants.items():
        votes = client_submit(
            keys, ctx, QUOTA, shuffler_pubs, terminal_pub, Random(name)
        )
        planned[name] = votes
        submissions[name] = [v.packet for v in votes]
        sizes = sorted({len(v.packet.to_bytes()) for v in votes})
        print(
            f"{name} sends {len(votes)} packets of {sizes} bytes "
            f"({len(keys)} buffered votes, the rest dummy cover)"
        )

    result = server.run_round(ctx, submissions)
    tally = ", ".join(f"{k.name}={n}" for k, n in sorted(result.tally.items()))
    print(f"\nround {result.t_timestamp} tally: {tally}")
    print(f"dummy packets absorbed: {result.dummy_count}")

    total_in = sum(result.accepted.values())
    total_out = sum(result.tally.values()) + result.dummy_count + result.undecodable
    print(f"conservation: {total_in} packets in, {total_out} classified out")

    print()
    for name, votes in planned.items():
        outcomes, reports = verify_round_acks(votes, result.acks.get(name, []))
        verified = sum(1 for o in outcomes if o is AckOutcome.VERIFIED)
        print(
            f"{name}: {verified}/{len(votes)} acks verified, "
            f"{len(reports)} misbehavior reports"
        )


if __name__ == "__main__":
    main()
