from ipaddress import IPv4Address

import pytest

from appnet import names
from appnet.errors import (
    AddrInUse,
    AmbiguousName,
    AttachFailed,
    Unidentified,
    UnknownApp,
    WouldBlock,
)
from appnet.model import AUTO_POOL, LINK_LOCAL_POOL, ServiceKey, parse_app_spec
from appnet.simharness import ScriptEvent, SimCluster
from appnet.trap import HandleKind


def one_node_cluster(seed=100):
    cluster = SimCluster(seed=seed)
    cluster.run_until(0, [ScriptEvent(0, "start", ["n0"])])
    return cluster, cluster.nodes["n0"].node


def test_user_vip_kept_as_effective():
    _, node = one_node_cluster()
    identity = node.add_app(parse_app_spec(["--name", "web", "--ip", "10.1.1.1"]))
    assert identity.effective_vip == IPv4Address("10.1.1.1")


def test_named_app_gets_auto_pool_vip():
    _, node = one_node_cluster()
    identity = node.add_app(parse_app_spec(["--name", "web"]))
    assert identity.effective_vip in AUTO_POOL
    assert identity.effective_vip == names.allocate_internal_ip("web")


def test_anonymous_app_gets_link_local_vip():
    _, node = one_node_cluster()
    identity = node.add_app(parse_app_spec([]))
    assert identity.effective_vip in LINK_LOCAL_POOL
    assert not identity.is_identified


def test_same_name_same_vip_on_every_node():
    cluster = SimCluster(seed=5)
    cluster.run_until(0, [
        ScriptEvent(0, "start", ["a"]),
        ScriptEvent(0, "start", ["b", "join=a"]),
    ])
    ia = cluster.nodes["a"].node.add_app(parse_app_spec(["--name", "web"]), app_id="w1")
    ib = cluster.nodes["b"].node.add_app(parse_app_spec(["--name", "web"]), app_id="w2")
    assert ia.effective_vip == ib.effective_vip


def test_conflicting_alias_raises_ambiguous_name():
    cluster = SimCluster(seed=6)
    cluster.run_until(3, [
        ScriptEvent(0, "start", ["a"]),
        ScriptEvent(1, "add", ["a", "w1", "--name", "web", "--ip", "10.1.1.1"]),
        ScriptEvent(2, "serve", ["w1", "80"]),
    ])
    node = cluster.nodes["a"].node
    with pytest.raises(AmbiguousName):
        node.add_app(parse_app_spec(["--name", "web", "--ip", "10.2.2.2"]))
    # The same alias with the same vip is a distributed app, not a conflict.
    node.add_app(parse_app_spec(["--name", "web", "--ip", "10.1.1.1"]))


def test_attach_semantics():
    _, node = one_node_cluster()
    node.add_app(parse_app_spec([]), app_id="a1")
    with pytest.raises(AttachFailed):
        node.attach("missing")
    node.attach("a1")
    with pytest.raises(AttachFailed):
        node.attach("a1")


def test_anonymous_bind_is_rejected():
    cluster, node = one_node_cluster()
    node.add_app(parse_app_spec([]), app_id="anon")
    shim = __import__("appnet.trap", fromlist=["SocketShim"]).SocketShim(node.attach("anon"))
    handle = shim.socket(HandleKind.STREAM)
    with pytest.raises(Unidentified):
        shim.bind(handle, (IPv4Address("0.0.0.0"), 80))


def test_rebind_same_port_by_same_app_rejected():
    cluster = SimCluster(seed=8)
    cluster.run_until(3, [
        ScriptEvent(0, "start", ["a"]),
        ScriptEvent(1, "add", ["a", "w", "--ip", "10.1.1.1"]),
        ScriptEvent(2, "serve", ["w", "80"]),
    ])
    app = cluster.apps["w"]
    handle = app.shim.socket(HandleKind.STREAM)
    with pytest.raises(AddrInUse):
        app.shim.bind(handle, (IPv4Address("0.0.0.0"), 80))


def test_bind_port_zero_allocates_service_port():
    cluster = SimCluster(seed=9)
    cluster.run_until(2, [
        ScriptEvent(0, "start", ["a"]),
        ScriptEvent(1, "add", ["a", "w", "--ip", "10.1.1.1"]),
    ])
    app = cluster.apps["w"]
    handle = app.shim.socket(HandleKind.STREAM)
    vip, port = app.shim.bind(handle, (IPv4Address("0.0.0.0"), 0))
    assert vip == IPv4Address("10.1.1.1")
    assert 49152 <= port <= 65535
    assert cluster.nodes["a"].node.table.lookup(ServiceKey(vip, port))


def test_remove_app_tombstones_and_detaches():
    cluster = SimCluster(seed=10)
    cluster.run_until(3, [
        ScriptEvent(0, "start", ["a"]),
        ScriptEvent(1, "add", ["a", "w", "--ip", "10.1.1.1"]),
        ScriptEvent(2, "serve", ["w", "80"]),
    ])
    node = cluster.nodes["a"].node
    assert node.remove_app("w") == 1
    assert node.table.lookup(ServiceKey(IPv4Address("10.1.1.1"), 80)) == []
    with pytest.raises(UnknownApp):
        node.remove_app("w")


def test_close_of_listening_handle_withdraws_service():
    cluster = SimCluster(seed=11)
    cluster.run_until(3, [
        ScriptEvent(0, "start", ["a"]),
        ScriptEvent(1, "add", ["a", "w", "--ip", "10.1.1.1"]),
        ScriptEvent(2, "serve", ["w", "80"]),
    ])
    app = cluster.apps["w"]
    node = cluster.nodes["a"].node
    key = ServiceKey(IPv4Address("10.1.1.1"), 80)
    assert node.table.lookup(key)
    app.shim.close(app.serving[0])
    assert node.table.lookup(key) == []


def _final_entry_state(cluster, label):
    node = cluster.nodes[label].node
    return {
        (str(e.key), e.app_id): e.state.name for e in node.table.snapshot()
    }


def test_crash_equivalence_with_graceful_removal():
    # Killing a node and waiting out suspicion must leave the same live and
    # tombstoned key set as removing each of its apps, incarnations aside.
    def build():
        cluster = SimCluster(seed=55)
        cluster.run_until(8, [
            ScriptEvent(0, "start", ["a"]),
            ScriptEvent(0, "start", ["b", "join=a"]),
            ScriptEvent(1, "add", ["b", "x", "--ip", "10.4.0.1"]),
            ScriptEvent(1, "add", ["b", "y", "--ip", "10.4.0.2"]),
            ScriptEvent(2, "serve", ["x", "80"]),
            ScriptEvent(2, "serve", ["y", "81"]),
        ])
        return cluster

    crashed = build()
    crashed.crash("b")
    crashed.run_until(crashed.clock + 12)

    graceful = build()
    graceful.remove_app("x")
    graceful.remove_app("y")
    graceful.run_until(graceful.clock + 12)

    assert _final_entry_state(crashed, "a") == _final_entry_state(graceful, "a")


def test_fresh_node_converges_via_single_join_sync():
    cluster = SimCluster(seed=60)
    cluster.run_until(4, [
        ScriptEvent(0, "start", ["a"]),
        ScriptEvent(1, "add", ["a", "w", "--ip", "10.1.1.1"]),
        ScriptEvent(2, "serve", ["w", "80"]),
    ])
    cluster.run_until(5, [ScriptEvent(5, "start", ["late", "join=a"])])
    # One anti-entropy exchange happens during the join tick itself.
    cluster.run_until(7)
    late = cluster.nodes["late"].node
    assert late.table.lookup(ServiceKey(IPv4Address("10.1.1.1"), 80))
