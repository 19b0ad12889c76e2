import random
from dataclasses import replace
from ipaddress import IPv4Address

import pytest

from appnet.errors import DecodeError
from appnet.gossip import (
    EnvelopeKind,
    Gossip,
    GossipEnvelope,
    GossipParams,
    MemberRecord,
    MemberStatus,
    decode_envelope,
    encode_envelope,
)
from appnet.model import HostId, RealEndpoint, ServiceKey, TagSet
from appnet.service_table import EntryState, ServiceEntry, ServiceTable

H1 = HostId(b"\x01" * 16)
H2 = HostId(b"\x02" * 16)
H3 = HostId(b"\x03" * 16)
H4 = HostId(b"\x04" * 16)


def addr(n: int) -> RealEndpoint:
    return RealEndpoint(IPv4Address(f"10.0.0.{n}"), 7946)


def member(host, n, status=MemberStatus.ALIVE, incarnation=1, gateway=False):
    return MemberRecord(
        host=host, addr=addr(n), status=status, incarnation=incarnation,
        is_gateway=gateway,
    )


def sample_entry(host=H2, incarnation=1):
    return ServiceEntry(
        key=ServiceKey(IPv4Address("10.1.1.1"), 80),
        real=RealEndpoint(IPv4Address("10.0.0.2"), 41001),
        host=host,
        app_id="a1",
        tags=TagSet.from_pairs(["grp=1"]),
        name="web",
        incarnation=incarnation,
        state=EntryState.ALIVE,
    )


def make_gossip(host=H1, n=1, gateway=False, **params):
    table = ServiceTable(host)
    g = Gossip(
        member(host, n, gateway=gateway),
        table,
        random.Random(f"g{n}"),
        GossipParams(**params) if params else None,
    )
    table.on_local_update = g.queue_delta
    return g


def test_envelope_round_trip():
    env = GossipEnvelope(
        kind=EnvelopeKind.PING,
        sender=H1,
        membership_rumors=[member(H2, 2), member(H3, 3, MemberStatus.SUSPECT, 4, True)],
        table_deltas=[sample_entry()],
    )
    data = encode_envelope(env)
    decoded = decode_envelope(data)
    assert decoded.kind is EnvelopeKind.PING
    assert decoded.sender == H1
    assert [m.host for m in decoded.membership_rumors] == [H2, H3]
    assert decoded.membership_rumors[1].is_gateway
    assert decoded.membership_rumors[1].status is MemberStatus.SUSPECT
    assert decoded.table_deltas[0].key == sample_entry().key
    assert decoded.sync_digest is None
    # Encoding is bit-stable.
    assert encode_envelope(decoded) == data


def test_sync_envelope_carries_digest():
    env = GossipEnvelope(
        kind=EnvelopeKind.SYNC,
        sender=H1,
        sync_digest=[(b"id-1", 3), (b"id-2", 9)],
    )
    decoded = decode_envelope(encode_envelope(env))
    assert decoded.sync_digest == [(b"id-1", 3), (b"id-2", 9)]


def test_truncated_envelope_rejected():
    data = encode_envelope(GossipEnvelope(kind=EnvelopeKind.ACK, sender=H1))
    for cut in (1, 5, len(data) - 1):
        with pytest.raises(DecodeError):
            decode_envelope(data[:cut])
    with pytest.raises(DecodeError):
        decode_envelope(b"\x02" + data[1:])  # wrong version


def test_single_node_emits_nothing():
    g = make_gossip()
    assert g.tick(1) == []


def test_two_nodes_ping_each_other_with_alive_records():
    a, b = make_gossip(H1, 1), make_gossip(H2, 2)
    # Introduce them as a join would.
    a.handle_envelope(b.anti_entropy(), 0, addr(2))
    b.handle_envelope(a.anti_entropy(), 0, addr(1))
    out_a = a.tick(1)
    out_b = b.tick(1)
    assert len(out_a) == 1 and len(out_b) == 1
    dest_a, ping_a = out_a[0]
    assert dest_a == addr(2)
    assert ping_a.kind is EnvelopeKind.PING
    assert any(
        r.host == H2 and r.status is MemberStatus.ALIVE
        for r in ping_a.membership_rumors
    )


def test_ping_gets_ack_with_self_attestation():
    a, b = make_gossip(H1, 1), make_gossip(H2, 2)
    a.handle_envelope(b.anti_entropy(), 0, addr(2))
    (dest, ping), = a.tick(1)
    replies = b.handle_envelope(ping, 1, addr(1))
    acks = [env for _, env in replies if env.kind is EnvelopeKind.ACK]
    assert len(acks) == 1
    assert acks[0].membership_rumors[0].host == H2
    # The ack clears the outstanding probe.
    a.handle_envelope(acks[0], 1, addr(2))
    assert H2 not in a._outstanding
    assert a.members[H2].status is MemberStatus.ALIVE
    # The next period simply probes again; no indirect probes fire.
    out2 = a.tick(2)
    assert [env.kind for _, env in out2] == [EnvelopeKind.PING]


def test_unanswered_probe_leads_to_ping_req_then_suspect_then_dead():
    g = make_gossip(H1, 1, suspect_timeout=4)
    for h, n in [(H2, 2), (H3, 3), (H4, 4)]:
        g._merge_member(member(h, n), 0)
    g.tick(1)  # ping someone
    target = next(iter(g._outstanding))
    out2 = g.tick(2)
    ping_reqs = [env for _, env in out2 if env.kind is EnvelopeKind.PING_REQ]
    assert ping_reqs, "indirect probes expected after a silent period"
    assert all(env.membership_rumors[0].host == target for env in ping_reqs)
    g.tick(3)
    assert g.members[target].status is MemberStatus.SUSPECT
    dead = []
    for now in range(4, 9):
        g.tick(now)
        if g.members[target].status is MemberStatus.DEAD:
            dead.append(now)
            break
    assert dead and dead[0] == 3 + 4  # suspicion at 3, T_suspect periods later


def test_proxy_relays_attestation_ack():
    b = make_gossip(H2, 2)
    b._merge_member(member(H1, 1), 0)
    b._merge_member(member(H3, 3), 0)
    ping_req = GossipEnvelope(
        kind=EnvelopeKind.PING_REQ, sender=H1, membership_rumors=[member(H3, 3)]
    )
    out = b.handle_envelope(ping_req, 1, addr(1))
    assert [env.kind for _, env in out] == [EnvelopeKind.PING]
    assert out[0][0] == addr(3)
    ack_from_target = GossipEnvelope(
        kind=EnvelopeKind.ACK, sender=H3, membership_rumors=[member(H3, 3)]
    )
    relayed = b.handle_envelope(ack_from_target, 1, addr(3))
    assert [(dest, env.kind) for dest, env in relayed] == [
        (addr(1), EnvelopeKind.ACK)
    ]
    assert relayed[0][1].membership_rumors[0].host == H3


def test_refutation_on_suspect_rumor_about_self():
    g = make_gossip(H1, 1)
    g._merge_member(member(H2, 2), 0)
    rumor = GossipEnvelope(
        kind=EnvelopeKind.ACK,
        sender=H2,
        membership_rumors=[
            member(H2, 2),
            member(H1, 1, MemberStatus.SUSPECT, incarnation=1),
        ],
    )
    g.handle_envelope(rumor, 3, addr(2))
    assert g.local_record.status is MemberStatus.ALIVE
    assert g.local_record.incarnation == 2


def test_dead_is_terminal_until_higher_incarnation():
    g = make_gossip(H1, 1)
    g._merge_member(member(H2, 2, MemberStatus.DEAD, incarnation=5), 0)
    g._merge_member(member(H2, 2, MemberStatus.ALIVE, incarnation=5), 1)
    assert g.members[H2].status is MemberStatus.DEAD
    g._merge_member(member(H2, 2, MemberStatus.ALIVE, incarnation=6), 2)
    assert g.members[H2].status is MemberStatus.ALIVE


def test_host_death_tombstones_its_entries():
    g = make_gossip(H1, 1, suspect_timeout=1)
    g.table.merge_remote(sample_entry(host=H2), 0)
    dead_hosts = []
    g.on_host_dead = dead_hosts.append
    g._merge_member(member(H2, 2), 0)
    g._merge_member(member(H2, 2, MemberStatus.SUSPECT, incarnation=1), 1)
    g.suspect_timeout_sweep(5)
    assert dead_hosts == [H2]
    assert g.table.lookup(sample_entry().key) == []


def test_sync_reply_returns_missing_records_and_reverse_syncs():
    a, b = make_gossip(H1, 1), make_gossip(H2, 2)
    b.table.insert_local(sample_entry(host=H2), 0)
    a.table.insert_local(
        replace(sample_entry(host=H1), real=RealEndpoint(IPv4Address("10.0.0.1"), 5)), 0
    )
    # Rumor budgets long spent: only the digests can close the gap now.
    a._delta_queue.clear()
    b._delta_queue.clear()
    out = b.handle_envelope(a.anti_entropy(), 1, addr(1))
    kinds = [env.kind for _, env in out]
    assert EnvelopeKind.SYNC_REPLY in kinds
    assert EnvelopeKind.SYNC in kinds  # b wants what a has
    reply = next(env for _, env in out if env.kind is EnvelopeKind.SYNC_REPLY)
    assert any(
        getattr(r, "host", None) == H2 for r in reply.table_deltas
    )
    a.handle_envelope(reply, 1, addr(2))
    assert len(a.table.lookup(sample_entry().key)) == 2


def test_applied_deltas_are_requeued_for_spreading():
    g = make_gossip(H1, 1)
    env = GossipEnvelope(
        kind=EnvelopeKind.PING, sender=H2, table_deltas=[sample_entry(host=H2)]
    )
    g.handle_envelope(env, 1, addr(2))
    assert g._delta_queue  # learned news is infective
    g.handle_envelope(env, 2, addr(2))  # replay does not reset budgets
    (slot,) = g._delta_queue.values()
    assert slot[0].host == H2


def test_rumor_budget_bounds_piggyback():
    g = make_gossip(H1, 1, piggyback_limit=3)
    for i in range(2, 9):
        g._merge_member(member(HostId(bytes([i]) * 16), i), 0)
    (dest, ping), = [o for o in g.tick(1) if o[1].kind is EnvelopeKind.PING]
    assert len(ping.membership_rumors) <= 3
    assert len(encode_envelope(ping)) < 60000


def test_join_retries_with_backoff_until_contact():
    g = make_gossip(H1, 1)
    g.begin_join(addr(9))
    sync_ticks = []
    for now in range(0, 12):
        outs = g.tick(now)
        if any(env.kind is EnvelopeKind.SYNC for _, env in outs):
            sync_ticks.append(now)
    assert sync_ticks[:4] == [0, 1, 3, 7]
    # Contact stops the retry loop.
    g._merge_member(member(H2, 2), 12)
    assert all(
        env.kind is not EnvelopeKind.SYNC or 12 % 10 == 0
        for _, env in g.tick(12)
    )
