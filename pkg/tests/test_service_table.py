import random
from dataclasses import replace
from ipaddress import IPv4Address

import pytest

from appnet.errors import AmbiguousName, DuplicateAppBinding
from appnet.model import HostId, RealEndpoint, ServiceKey, TagSet
from appnet.service_table import (
    EntryState,
    MergeOutcome,
    ServiceEntry,
    ServiceTable,
    decode_entry,
    encode_entry,
)

H1 = HostId(b"\x01" * 16)
H2 = HostId(b"\x02" * 16)
H3 = HostId(b"\x03" * 16)


def entry(
    host=H1,
    app_id="a1",
    vip="10.1.1.1",
    port=80,
    real_port=41712,
    incarnation=1,
    state=EntryState.ALIVE,
    name=None,
    tags=(),
):
    return ServiceEntry(
        key=ServiceKey(IPv4Address(vip), port),
        real=RealEndpoint(IPv4Address(f"192.168.0.{int(host.raw[0])}"), real_port),
        host=host,
        app_id=app_id,
        tags=TagSet.from_pairs(list(tags)),
        name=name,
        incarnation=incarnation,
        state=state,
    )


def test_insert_then_lookup():
    table = ServiceTable(H1)
    assert table.insert_local(entry(), 0) is MergeOutcome.APPLIED
    found = table.lookup(ServiceKey(IPv4Address("10.1.1.1"), 80))
    assert len(found) == 1
    assert found[0].real.port == 41712


def test_same_key_from_other_host_is_load_balanced_set():
    table = ServiceTable(H1)
    table.insert_local(entry(), 0)
    assert table.merge_remote(entry(host=H2, app_id="a2"), 0) is MergeOutcome.APPLIED
    found = table.lookup(ServiceKey(IPv4Address("10.1.1.1"), 80))
    assert len(found) == 2
    assert {e.host for e in found} == {H1, H2}


def test_double_bind_by_one_app_rejected():
    table = ServiceTable(H1)
    table.insert_local(entry(), 0)
    with pytest.raises(DuplicateAppBinding):
        table.insert_local(entry(real_port=50000), 0)


def test_lookup_empty_table():
    table = ServiceTable(H1)
    assert table.lookup(ServiceKey(IPv4Address("10.9.9.9"), 1)) == []


def test_merge_incarnation_wins_and_ties_are_stale():
    table = ServiceTable(H1)
    resident = entry(host=H2, app_id="a2", incarnation=3)
    assert table.merge_remote(resident, 0) is MergeOutcome.APPLIED
    assert table.merge_remote(replace(resident, incarnation=5), 0) is MergeOutcome.APPLIED
    assert table.merge_remote(replace(resident, incarnation=5), 0) is MergeOutcome.STALE
    assert table.merge_remote(replace(resident, incarnation=3), 0) is MergeOutcome.STALE


def test_tombstone_host_hides_entries_and_bumps_incarnation():
    table = ServiceTable(H1)
    table.merge_remote(entry(host=H2, app_id="a2", incarnation=4), 0)
    assert table.tombstone_host(H2, now=7) == 1
    assert table.lookup(ServiceKey(IPv4Address("10.1.1.1"), 80)) == []
    stone = table.snapshot()[0]
    assert stone.state is EntryState.TOMBSTONE
    assert stone.incarnation == 5


def test_no_resurrection_after_tombstone():
    table = ServiceTable(H1)
    victim = entry(host=H2, app_id="a2", incarnation=4)
    table.merge_remote(victim, 0)
    table.tombstone_host(H2, now=0)
    assert table.merge_remote(replace(victim, incarnation=5), 0) is MergeOutcome.STALE
    assert table.merge_remote(replace(victim, incarnation=4), 0) is MergeOutcome.STALE
    assert table.lookup(victim.key) == []
    # Only a strictly newer registration returns.
    assert table.merge_remote(replace(victim, incarnation=6), 0) is MergeOutcome.APPLIED
    assert len(table.lookup(victim.key)) == 1


def test_owner_refutes_foreign_tombstone():
    table = ServiceTable(H1)
    table.insert_local(entry(), 0)
    announced = []
    table.on_local_update = announced.append
    stone = replace(entry(), state=EntryState.TOMBSTONE, incarnation=2)
    assert table.merge_remote(stone, 5) is MergeOutcome.REFUTED
    survivor = table.lookup(entry().key)[0]
    assert survivor.incarnation == 3
    assert announced and announced[0].incarnation == 3


def test_gc_keeps_fresh_and_drops_old_tombstones():
    table = ServiceTable(H1)
    table.insert_local(entry(), 0)
    table.tombstone_entry(entry().entry_id, now=10)
    assert table.gc_tombstones(now=20) == 0
    assert table.gc_tombstones(now=41) == 1
    assert table.snapshot() == []


def test_lookup_name_resolution_rules():
    table = ServiceTable(H1)
    assert table.lookup_name("web") is None
    table.insert_local(entry(name="web", vip="240.1.1.1"), 0)
    assert table.lookup_name("web") == IPv4Address("240.1.1.1")
    assert table.lookup_name("WEB") == IPv4Address("240.1.1.1")
    # Two live holders with the same vip: a distributed app, no error.
    table.merge_remote(
        entry(host=H2, app_id="a2", name="web", vip="240.1.1.1", port=81), 0
    )
    assert table.lookup_name("web") == IPv4Address("240.1.1.1")
    # A holder with a different vip makes the alias ambiguous.
    table.merge_remote(
        entry(host=H3, app_id="a3", name="web", vip="240.2.2.2"), 0
    )
    with pytest.raises(AmbiguousName):
        table.lookup_name("web")


def test_tombstones_excluded_from_name_lookup():
    table = ServiceTable(H1)
    table.insert_local(entry(name="web", vip="240.1.1.1"), 0)
    table.tombstone_host(H1, 0)
    assert table.lookup_name("web") is None


def test_entry_codec_round_trip():
    e = entry(name="web", tags=("grp=1", "grp=2", "env=prod"), incarnation=9)
    assert decode_entry(encode_entry(e)) == replace(e, stamp=0)


def test_dump_format_is_stable():
    table = ServiceTable(H1)
    table.insert_local(entry(name="web", tags=("grp=1",)), 0)
    table.merge_remote(entry(host=H2, app_id="a2", vip="10.1.1.2", port=443), 0)
    lines = table.dump().splitlines()
    assert lines[0].split("\t") == [
        "10.1.1.1:80",
        "192.168.0.1:41712",
        H1.hex,
        "alive",
        "1",
        "web",
        "grp=1",
    ]
    assert lines[1].split("\t") == [
        "10.1.1.2:443",
        "192.168.0.2:41712",
        H2.hex,
        "alive",
        "1",
        "-",
        "-",
    ]


# --- convergence property against a brute-force oracle ---


def _random_events(rng, hosts, n_events):
    """A universe of entry versions; the oracle keeps the per-id maximum."""
    events = []
    for _ in range(n_events):
        host = rng.choice(hosts)
        app = f"a{rng.randrange(3)}"
        port = rng.choice([80, 81])
        incarnation = rng.randrange(1, 8)
        state = EntryState.ALIVE if incarnation % 2 == 1 else EntryState.TOMBSTONE
        events.append(
            entry(
                host=host,
                app_id=app,
                port=port,
                incarnation=incarnation,
                state=state,
            )
        )
    return events


def _oracle_view(events):
    best = {}
    for e in events:
        key = e.entry_id
        if key not in best or (e.incarnation, e.host) > (
            best[key].incarnation,
            best[key].host,
        ):
            best[key] = e
    return {
        k: (v.incarnation, v.state) for k, v in best.items()
    }


def _table_view(table):
    return {e.entry_id: (e.incarnation, e.state) for e in table.snapshot()}


def test_merge_convergence_matches_oracle():
    rng = random.Random(20240)
    hosts = [H2, H3]  # never the local host, so no refutation paths
    for _ in range(300):
        events = _random_events(rng, hosts, rng.randrange(1, 12))
        replica_a, replica_b = ServiceTable(H1), ServiceTable(HostId(b"\x09" * 16))
        order_a = events[:]
        order_b = events[:]
        rng.shuffle(order_a)
        rng.shuffle(order_b)
        # Duplicate deliveries are normal gossip behavior.
        order_a += rng.sample(order_a, k=min(3, len(order_a)))
        for e in order_a:
            replica_a.merge_remote(e, 0)
        for e in order_b:
            replica_b.merge_remote(e, 0)
        expected = _oracle_view(events)
        assert _table_view(replica_a) == expected
        assert _table_view(replica_b) == expected


def test_full_replay_idempotence():
    rng = random.Random(7)
    events = _random_events(rng, [H2, H3], 20)
    table = ServiceTable(H1)
    for e in events:
        table.merge_remote(e, 0)
    settled = _table_view(table)
    outcomes = [table.merge_remote(e, 1) for e in events]
    assert all(o is MergeOutcome.STALE for o in outcomes)
    assert _table_view(table) == settled
