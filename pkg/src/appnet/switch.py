"""Trap-handler semantics: registration, policy-checked connects, identity answers.

The switch owns the per-application handle state on one node. It resolves
virtual destinations through the service table, gates them on segmentation
tags, picks an instance client-side, and establishes the transport: a local
pair when the chosen instance lives on the same node, otherwise a stream to
the instance's real endpoint carrying an identity preamble. Once a transport
is handed to the application the switch never sees its bytes again.

Preamble wire format: magic 0x41535057 ("ASPW"), version byte, client vip
(4 bytes), client service port (2 bytes), big-endian.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from ipaddress import IPv4Address, IPv4Network
from typing import Callable, Optional, Protocol

from appnet import names, wire
from appnet.errors import (
    AddrInUse,
    AppNetError,
    BadHandle,
    ConnRefused,
    Denied,
    MessageTooLong,
    NoSuchService,
    NotConnected,
    Unidentified,
    WouldBlock,
)
from appnet.model import AppIdentity, HostId, RealEndpoint, ServiceKey, TagSet
from appnet.service_table import EntryId, ServiceEntry, ServiceTable, EntryState
from appnet.trap import (
    MAX_DGRAM,
    Addr,
    HandleKind,
    HandleRole,
    TrapOp,
    TrapReply,
    TrapRequest,
    VHandle,
    error_reply,
)

LOOPBACK = IPv4Network("127.0.0.0/8")

PREAMBLE_MAGIC = 0x41535057  # "ASPW"
PREAMBLE_VERSION = 0x01
PREAMBLE_SIZE = 11

POLICY_KEY = "grp"

MAX_CONNECT_ATTEMPTS = 3

DNS_PORT = 53


class ChannelKind(Enum):
    LOCAL = "local"
    REMOTE = "remote"


@dataclass(frozen=True)
class ConnMeta:
    """Virtual identities of an established connection; fixed for its lifetime."""

    local_virtual: Addr
    peer_virtual: Addr
    channel_kind: ChannelKind


class StrategyMode(Enum):
    RENDEZVOUS = "rendezvous"
    ROUND_ROBIN = "rr"


@dataclass(frozen=True)
class SelectionStrategy:
    mode: StrategyMode = StrategyMode.RENDEZVOUS
    seed: int = 0


def encode_preamble(addr: Addr) -> bytes:
    w = wire.Writer()
    w.u32(PREAMBLE_MAGIC).u8(PREAMBLE_VERSION).ip4(addr[0]).u16(addr[1])
    return w.getvalue()


def decode_preamble(data: bytes) -> Optional[Addr]:
    """The identity carried by a preamble, or None when there isn't one."""
    if len(data) != PREAMBLE_SIZE:
        return None
    r = wire.Reader(data)
    if r.u32() != PREAMBLE_MAGIC or r.u8() != PREAMBLE_VERSION:
        return None
    return (r.ip4(), r.u16())


@dataclass(frozen=True)
class PolicyDecision:
    allowed: bool
    reason: Optional[str] = None


def policy_allows(client_tags: TagSet, server_tags: TagSet) -> PolicyDecision:
    """Allow unless the server declares groups the client does not share."""
    server_groups = server_tags.values(POLICY_KEY)
    if not server_groups:
        return PolicyDecision(True)
    client_groups = client_tags.values(POLICY_KEY)
    if server_groups & client_groups:
        return PolicyDecision(True)
    return PolicyDecision(
        False,
        f"no shared '{POLICY_KEY}' value: client {sorted(client_groups)} "
        f"vs server {sorted(server_groups)}",
    )


def _rendezvous_weight(
    seed: int, client_app_id: str, key: ServiceKey, entry: ServiceEntry
) -> int:
    material = f"{seed}|{client_app_id}|{key}|{entry.host.hex}:{entry.app_id}"
    return names.fnv1a64(material.encode())


def selection_order(
    client_app_id: str,
    key: ServiceKey,
    candidates: list[ServiceEntry],
    strategy: SelectionStrategy,
    rr_counter: int = 0,
) -> list[ServiceEntry]:
    """Full preference order; connect retries walk it front to back."""
    ordered = sorted(candidates, key=lambda e: (e.host, e.app_id))
    if not ordered:
        return []
    if strategy.mode is StrategyMode.ROUND_ROBIN:
        start = rr_counter % len(ordered)
        return ordered[start:] + ordered[:start]
    ordered.sort(
        key=lambda e: (
            _rendezvous_weight(strategy.seed, client_app_id, key, e),
            e.host,
            e.app_id,
        ),
        reverse=True,
    )
    return ordered


def select_endpoint(
    client_app_id: str,
    key: ServiceKey,
    candidates: list[ServiceEntry],
    strategy: SelectionStrategy,
    rr_counter: int = 0,
) -> ServiceEntry:
    order = selection_order(client_app_id, key, candidates, strategy, rr_counter)
    if not order:
        raise NoSuchService(f"no live instance for {key}")
    return order[0]


class Fabric(Protocol):
    """Transport primitives a backend supplies to its node's switch."""

    def bind_stream(
        self, on_inbound: Callable[[object, Optional[Addr]], None]
    ) -> tuple[RealEndpoint, object]: ...

    def bind_dgram(
        self, on_dgram: Callable[[Optional[Addr], bytes], None]
    ) -> tuple[RealEndpoint, object]: ...

    def close_listener(self, token: object) -> None: ...

    def connect_stream(self, dest: RealEndpoint, preamble: bytes) -> object: ...

    def open_local_pair(self) -> tuple[object, object]: ...

    def send_dgram(self, dest: RealEndpoint, data: bytes) -> None: ...


@dataclass
class _HandleState:
    vh: VHandle
    key: Optional[ServiceKey] = None
    real: Optional[RealEndpoint] = None
    listener_token: Optional[object] = None
    meta: Optional[ConnMeta] = None
    accept_queue: deque = field(default_factory=deque)
    recv_queue: deque = field(default_factory=deque)
    pins: dict[ServiceKey, EntryId] = field(default_factory=dict)
    connected_peer: Optional[Addr] = None


@dataclass
class _AppState:
    identity: AppIdentity
    handles: dict[int, _HandleState] = field(default_factory=dict)
    next_handle: int = 1


class Switch:
    """One node's trap handler. Mutated only from the node's event loop."""

    def __init__(
        self,
        local_host: HostId,
        table: ServiceTable,
        fabric: Fabric,
        strategy: SelectionStrategy,
        clock: Callable[[], int],
    ) -> None:
        self.local_host = local_host
        self.table = table
        self.fabric = fabric
        self.strategy = strategy
        self.clock = clock
        self._apps: dict[str, _AppState] = {}
        self._local_services: dict[EntryId, tuple[str, int]] = {}
        self._rr_counters: dict[tuple[str, ServiceKey], int] = {}
        self.data_path_bytes = 0  # only the gateway proxy ever adds to this
        self.counters = {
            "streams_refused_unidentified": 0,
            "dgrams_dropped_unidentified": 0,
            "dgrams_dropped_filtered": 0,
        }
        # Real-socket runtimes hook this to wake blocked accept/recv calls.
        self.on_deliverable: Optional[Callable[[str, int], None]] = None

    # --- app lifecycle ---

    def register_app(self, identity: AppIdentity) -> None:
        if identity.app_id in self._apps:
            raise AddrInUse(f"app {identity.app_id} already registered")
        self._apps[identity.app_id] = _AppState(identity=identity)

    def unregister_app(self, app_id: str) -> list[EntryId]:
        """Drop an app's handles; returns the service entries it was serving."""
        state = self._apps.pop(app_id, None)
        if state is None:
            return []
        served = []
        for hs in state.handles.values():
            if hs.listener_token is not None:
                self.fabric.close_listener(hs.listener_token)
            if hs.key is not None:
                entry_id = (hs.key, self.local_host, app_id)
                self._local_services.pop(entry_id, None)
                served.append(entry_id)
        return served

    def app_identity(self, app_id: str) -> AppIdentity:
        return self._apps[app_id].identity

    # --- dispatch ---

    def dispatch(
        self, app_id: str, req: TrapRequest
    ) -> tuple[TrapReply, object | None]:
        state = self._apps.get(app_id)
        if state is None:
            return error_reply(BadHandle(f"unknown app {app_id}")), None
        try:
            return self._dispatch(state, req)
        except AppNetError as exc:
            return error_reply(exc), None

    def _dispatch(
        self, state: _AppState, req: TrapRequest
    ) -> tuple[TrapReply, object | None]:
        if req.op is TrapOp.SOCKET:
            return self._op_socket(state, req)
        hs = state.handles.get(req.handle)
        if hs is None:
            raise BadHandle(f"no handle {req.handle}")
        if req.op is TrapOp.BIND:
            return self._op_bind(state, hs, req)
        if req.op is TrapOp.LISTEN:
            return self._op_listen(hs)
        if req.op is TrapOp.CONNECT:
            return self._op_connect(state, hs, req)
        if req.op is TrapOp.ACCEPT:
            return self._op_accept(state, hs)
        if req.op in (TrapOp.GET_SOCK_NAME, TrapOp.GET_PEER_NAME):
            return self._op_name_query(state, hs, req.op)
        if req.op is TrapOp.SEND_TO:
            return self._op_sendto(state, hs, req)
        if req.op is TrapOp.RECV_FROM:
            return self._op_recvfrom(hs)
        if req.op is TrapOp.CLOSE:
            return self._op_close(state, hs)
        raise BadHandle(f"unhandled op {req.op}")

    # --- socket / bind / listen ---

    def _op_socket(
        self, state: _AppState, req: TrapRequest
    ) -> tuple[TrapReply, None]:
        kind = HandleKind(req.payload[0]) if req.payload else HandleKind.STREAM
        handle_id = state.next_handle
        state.next_handle += 1
        state.handles[handle_id] = _HandleState(vh=VHandle(handle_id, kind))
        return TrapReply(handle=handle_id), None

    def _op_bind(
        self, state: _AppState, hs: _HandleState, req: TrapRequest
    ) -> tuple[TrapReply, None]:
        if hs.vh.role is not HandleRole.UNBOUND:
            raise BadHandle(f"handle {hs.vh.id} is already {hs.vh.role.name}")
        assert req.addr is not None
        app = state.identity
        if not app.is_identified:
            raise Unidentified(
                "an application without a name or address cannot register a service"
            )
        vip = app.effective_vip
        port = req.addr[1] or self.table.next_free_service_port(vip)
        key = ServiceKey(vip, port)
        for other in state.handles.values():
            if other.key == key:
                raise AddrInUse(f"{key} already bound by this app")
        if hs.vh.kind is HandleKind.STREAM:
            real, token = self.fabric.bind_stream(
                lambda transport, peer, hid=hs.vh.id, aid=app.app_id: (
                    self._on_inbound_stream(aid, hid, transport, peer)
                )
            )
        else:
            real, token = self.fabric.bind_dgram(
                lambda peer, payload, hid=hs.vh.id, aid=app.app_id: (
                    self._on_inbound_dgram(aid, hid, peer, payload)
                )
            )
        entry = ServiceEntry(
            key=key,
            real=real,
            host=self.local_host,
            app_id=app.app_id,
            tags=app.spec.tags,
            name=app.spec.name,
            incarnation=0,
            state=EntryState.ALIVE,
        )
        try:
            self.table.insert_local(entry, self.clock())
        except AppNetError:
            self.fabric.close_listener(token)
            raise
        hs.key = key
        hs.real = real
        hs.listener_token = token
        hs.vh.role = HandleRole.BOUND
        self._local_services[(key, self.local_host, app.app_id)] = (
            app.app_id,
            hs.vh.id,
        )
        return TrapReply(addr=(key.vip, key.port)), None

    def _op_listen(self, hs: _HandleState) -> tuple[TrapReply, None]:
        if hs.vh.kind is not HandleKind.STREAM or hs.vh.role is not HandleRole.BOUND:
            raise BadHandle("listen needs a bound stream handle")
        hs.vh.role = HandleRole.LISTENING
        return TrapReply(), None

    # --- connect ---

    def _op_connect(
        self, state: _AppState, hs: _HandleState, req: TrapRequest
    ) -> tuple[TrapReply, object | None]:
        assert req.addr is not None
        app = state.identity
        dest_ip, dest_port = req.addr
        if dest_ip in LOOPBACK:
            # Inside a distributed application, loopback means "my own vip".
            dest_ip = app.effective_vip
        key = ServiceKey(dest_ip, dest_port)
        if hs.vh.kind is HandleKind.DATAGRAM:
            return self._connect_dgram(state, hs, key)
        if hs.vh.role is not HandleRole.UNBOUND:
            raise BadHandle(f"handle {hs.vh.id} is already {hs.vh.role.name}")
        client_virtual = (app.effective_vip, self._client_service_port(state))
        order = self._resolve(app.app_id, app.spec.tags, key)
        transport, kind = self._establish(client_virtual, key, order)
        hs.meta = ConnMeta(
            local_virtual=client_virtual,
            peer_virtual=(key.vip, key.port),
            channel_kind=kind,
        )
        hs.vh.role = HandleRole.CONNECTED
        return TrapReply(handle=hs.vh.id), transport

    def _resolve(
        self, client_app_id: str, client_tags: TagSet, key: ServiceKey
    ) -> list[ServiceEntry]:
        candidates = self.table.lookup(key)
        if not candidates:
            raise NoSuchService(f"no live instance for {key}")
        allowed, denial = [], None
        for entry in candidates:
            decision = policy_allows(client_tags, entry.tags)
            if decision.allowed:
                allowed.append(entry)
            elif denial is None:
                denial = decision.reason
        if not allowed:
            raise Denied(denial or "policy denied the connection")
        counter_key = (client_app_id, key)
        rr = self._rr_counters.get(counter_key, 0)
        order = selection_order(client_app_id, key, allowed, self.strategy, rr)
        if self.strategy.mode is StrategyMode.ROUND_ROBIN:
            self._rr_counters[counter_key] = rr + 1
        return order

    def connect_for_gateway(
        self,
        client_app_id: str,
        client_tags: TagSet,
        client_virtual: Addr,
        key: ServiceKey,
    ) -> tuple[object, ChannelKind]:
        """Inward connect on behalf of a proxied external peer."""
        order = self._resolve(client_app_id, client_tags, key)
        return self._establish(client_virtual, key, order)

    def _establish(
        self, client_virtual: Addr, key: ServiceKey, order: list[ServiceEntry]
    ) -> tuple[object, ChannelKind]:
        last_error: Optional[AppNetError] = None
        for entry in order[:MAX_CONNECT_ATTEMPTS]:
            if entry.host == self.local_host:
                try:
                    transport = self._connect_local(entry, client_virtual)
                except AppNetError as exc:
                    last_error = exc
                    continue
                return transport, ChannelKind.LOCAL
            try:
                transport = self.fabric.connect_stream(
                    entry.real, encode_preamble(client_virtual)
                )
            except AppNetError as exc:
                last_error = exc
                continue
            return transport, ChannelKind.REMOTE
        raise ConnRefused(
            f"all candidates for {key} failed: {last_error}"
        ) from last_error

    def _connect_local(self, entry: ServiceEntry, client_virtual: Addr) -> object:
        # The serving handle lives in this same switch; hand it the server
        # end of a fresh local pair so the node stays off the data path.
        owner = self._local_services.get(entry.entry_id)
        if owner is None:
            raise ConnRefused(f"{entry.entry_id} is not served here anymore")
        app_id, handle_id = owner
        server_state = self._apps[app_id].handles.get(handle_id)
        if server_state is None or server_state.vh.role is not HandleRole.LISTENING:
            raise ConnRefused(f"service handle for {entry.key} is not listening")
        client_end, server_end = self.fabric.open_local_pair()
        server_state.accept_queue.append(
            (server_end, client_virtual, ChannelKind.LOCAL)
        )
        self._notify(app_id, handle_id)
        return client_end

    def _client_service_port(self, state: _AppState) -> int:
        ports = [hs.key.port for hs in state.handles.values() if hs.key is not None]
        return min(ports) if ports else 0

    # --- accept / name queries ---

    def _op_accept(
        self, state: _AppState, hs: _HandleState
    ) -> tuple[TrapReply, object | None]:
        if hs.vh.role is not HandleRole.LISTENING:
            raise BadHandle("accept needs a listening handle")
        if not hs.accept_queue:
            raise WouldBlock("no pending connection")
        transport, peer_virtual, kind = hs.accept_queue.popleft()
        assert hs.key is not None
        conn_id = state.next_handle
        state.next_handle += 1
        conn = _HandleState(
            vh=VHandle(conn_id, HandleKind.STREAM, HandleRole.CONNECTED),
            meta=ConnMeta(
                local_virtual=(hs.key.vip, hs.key.port),
                peer_virtual=peer_virtual,
                channel_kind=kind,
            ),
        )
        state.handles[conn_id] = conn
        return TrapReply(handle=conn_id, addr=peer_virtual), transport

    def _op_name_query(
        self, state: _AppState, hs: _HandleState, op: TrapOp
    ) -> tuple[TrapReply, None]:
        if hs.meta is not None:
            addr = (
                hs.meta.local_virtual
                if op is TrapOp.GET_SOCK_NAME
                else hs.meta.peer_virtual
            )
            return TrapReply(addr=addr), None
        if hs.key is not None and op is TrapOp.GET_SOCK_NAME:
            return TrapReply(addr=(hs.key.vip, hs.key.port)), None
        raise NotConnected(f"handle {hs.vh.id} has no established peer")

    # --- datagrams ---

    def _connect_dgram(
        self, state: _AppState, hs: _HandleState, key: ServiceKey
    ) -> tuple[TrapReply, None]:
        """Connected UDP: pin the selection and filter inbound to that peer."""
        order = self._resolve(state.identity.app_id, state.identity.spec.tags, key)
        hs.pins[key] = order[0].entry_id
        hs.connected_peer = (key.vip, key.port)
        return TrapReply(handle=hs.vh.id), None

    def _op_sendto(
        self, state: _AppState, hs: _HandleState, req: TrapRequest
    ) -> tuple[TrapReply, None]:
        if hs.vh.kind is not HandleKind.DATAGRAM:
            raise BadHandle("sendto needs a datagram handle")
        assert req.addr is not None
        if len(req.payload) > MAX_DGRAM:
            raise MessageTooLong(f"{len(req.payload)} bytes exceeds {MAX_DGRAM}")
        app = state.identity
        dest_ip, dest_port = req.addr
        if dest_ip in LOOPBACK:
            dest_ip = app.effective_vip
        if dest_port == DNS_PORT:
            self._answer_dns(state, hs, (dest_ip, dest_port), req.payload)
            return TrapReply(), None
        key = ServiceKey(dest_ip, dest_port)
        entry = self._pinned_entry(state, hs, key)
        source = (app.effective_vip, self._client_service_port(state))
        if entry.host == self.local_host:
            owner = self._local_services.get(entry.entry_id)
            if owner is None:
                raise NoSuchService(f"{key} is not served here anymore")
            self._on_inbound_dgram(owner[0], owner[1], source, req.payload)
        else:
            self.fabric.send_dgram(
                entry.real, encode_preamble(source) + req.payload
            )
        return TrapReply(), None

    def _pinned_entry(
        self, state: _AppState, hs: _HandleState, key: ServiceKey
    ) -> ServiceEntry:
        pinned = hs.pins.get(key)
        if pinned is not None:
            for entry in self.table.lookup(key):
                if entry.entry_id == pinned:
                    return entry
            del hs.pins[key]  # pinned instance is gone; select afresh
        order = self._resolve(state.identity.app_id, state.identity.spec.tags, key)
        hs.pins[key] = order[0].entry_id
        return order[0]

    def _answer_dns(
        self, state: _AppState, hs: _HandleState, dest: Addr, query: bytes
    ) -> None:
        # Resolver traffic never leaves the node: port 53 datagrams are
        # answered from the local table, overriding any upstream view.
        def resolve(name: str) -> Optional[IPv4Address]:
            return self.table.lookup_name(name)

        try:
            response = names.dns_answer(query, resolve)
        except AppNetError:
            self.counters["dgrams_dropped_unidentified"] += 1
            return
        hs.recv_queue.append((dest, response))
        self._notify(state.identity.app_id, hs.vh.id)

    def _op_recvfrom(self, hs: _HandleState) -> tuple[TrapReply, None]:
        if hs.vh.kind is not HandleKind.DATAGRAM:
            raise BadHandle("recvfrom needs a datagram handle")
        while hs.recv_queue:
            source, payload = hs.recv_queue.popleft()
            if hs.connected_peer is not None and source != hs.connected_peer:
                self.counters["dgrams_dropped_filtered"] += 1
                continue
            return TrapReply(addr=source, payload=payload), None
        raise WouldBlock("no datagram queued")

    # --- close ---

    def _op_close(
        self, state: _AppState, hs: _HandleState
    ) -> tuple[TrapReply, None]:
        if hs.listener_token is not None:
            self.fabric.close_listener(hs.listener_token)
        if hs.key is not None:
            entry_id = (hs.key, self.local_host, state.identity.app_id)
            self._local_services.pop(entry_id, None)
            self.table.tombstone_entry(entry_id, self.clock())
        del state.handles[hs.vh.id]
        return TrapReply(), None

    # --- inbound from the fabric ---

    def _on_inbound_stream(
        self, app_id: str, handle_id: int, transport, peer: Optional[Addr]
    ) -> None:
        hs = self._handle_or_none(app_id, handle_id)
        if hs is None or hs.vh.role is not HandleRole.LISTENING or peer is None:
            # Unidentified or unexpected arrivals never reach the application.
            self.counters["streams_refused_unidentified"] += 1
            close = getattr(transport, "close", None)
            if close is not None:
                close()
            return
        hs.accept_queue.append((transport, peer, ChannelKind.REMOTE))
        self._notify(app_id, handle_id)

    def _on_inbound_dgram(
        self, app_id: str, handle_id: int, peer: Optional[Addr], payload: bytes
    ) -> None:
        hs = self._handle_or_none(app_id, handle_id)
        if hs is None or peer is None:
            self.counters["dgrams_dropped_unidentified"] += 1
            return
        hs.recv_queue.append((peer, payload))
        self._notify(app_id, handle_id)

    def _handle_or_none(self, app_id: str, handle_id: int) -> Optional[_HandleState]:
        state = self._apps.get(app_id)
        if state is None:
            return None
        return state.handles.get(handle_id)

    def _notify(self, app_id: str, handle_id: int) -> None:
        if self.on_deliverable is not None:
            self.on_deliverable(app_id, handle_id)

    # --- views for tests and the harness ---

    def conn_meta(self, app_id: str, handle_id: int) -> Optional[ConnMeta]:
        hs = self._handle_or_none(app_id, handle_id)
        return hs.meta if hs else None

    def pending_accepts(self, app_id: str, handle_id: int) -> int:
        hs = self._handle_or_none(app_id, handle_id)
        return len(hs.accept_queue) if hs else 0
