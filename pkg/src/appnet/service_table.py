"""The replicated service table: virtual identities mapped to real endpoints.

Every node holds one table. Local registrations enter through insert_local;
everything else arrives through merge_remote and converges by per-record
last-writer-wins on (incarnation, owner host). Deletion is a tombstone with a
bumped incarnation so it wins over the record it retires; tombstones are kept
for TOMBSTONE_TTL ticks, long enough to outlive in-flight rumors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from ipaddress import IPv4Address
from typing import Callable, Iterable, Optional, Union

from appnet import wire
from appnet.errors import AmbiguousName, DuplicateAppBinding
from appnet.gateway import BindingState, GatewayBinding, decode_binding, encode_binding
from appnet.model import AUTO_POOL, HostId, RealEndpoint, ServiceKey, TagSet

TOMBSTONE_TTL = 30  # gossip periods

SERVICE_PORT_MIN = 49152
SERVICE_PORT_MAX = 65535

_KIND_ENTRY = 0
_KIND_BINDING = 1


class EntryState(Enum):
    ALIVE = 0
    TOMBSTONE = 1


class MergeOutcome(Enum):
    APPLIED = "applied"
    STALE = "stale"
    REFUTED = "refuted"


EntryId = tuple[ServiceKey, HostId, str]


@dataclass(frozen=True)
class ServiceEntry:
    key: ServiceKey
    real: RealEndpoint
    host: HostId
    app_id: str
    tags: TagSet
    name: Optional[str]
    incarnation: int
    state: EntryState
    stamp: int = 0

    @property
    def entry_id(self) -> EntryId:
        return (self.key, self.host, self.app_id)


TableRecord = Union[ServiceEntry, GatewayBinding]


def encode_entry(e: ServiceEntry) -> bytes:
    w = wire.Writer()
    w.ip4(e.key.vip).u16(e.key.port)
    w.ip4(e.real.host_ip).u16(e.real.port)
    w.raw(e.host.raw)
    w.lp16(e.app_id.encode())
    w.u8(e.state.value)
    w.u64(e.incarnation)
    w.lp16((e.name or "").encode())
    pairs = e.tags.pairs()
    w.u16(len(pairs))
    for pair in pairs:
        w.lp16(pair.encode())
    return w.getvalue()


def decode_entry(data: bytes) -> ServiceEntry:
    r = wire.Reader(data)
    key = ServiceKey(r.ip4(), r.u16())
    real = RealEndpoint(r.ip4(), r.u16())
    host = HostId(r.raw(16))
    app_id = r.lp16().decode()
    state = EntryState(r.u8())
    incarnation = r.u64()
    name = r.lp16().decode() or None
    pairs = [r.lp16().decode() for _ in range(r.u16())]
    r.expect_end()
    return ServiceEntry(
        key=key,
        real=real,
        host=host,
        app_id=app_id,
        tags=TagSet.from_pairs(pairs),
        name=name,
        incarnation=incarnation,
        state=state,
    )


def encode_record(record: TableRecord) -> bytes:
    if isinstance(record, ServiceEntry):
        return bytes([_KIND_ENTRY]) + encode_entry(record)
    return bytes([_KIND_BINDING]) + encode_binding(record)


def decode_record(data: bytes) -> TableRecord:
    if not data:
        raise wire.DecodeError("empty table record")
    kind, body = data[0], data[1:]
    if kind == _KIND_ENTRY:
        return decode_entry(body)
    if kind == _KIND_BINDING:
        return decode_binding(body)
    raise wire.DecodeError(f"unknown table record kind {kind}")


def record_id_bytes(record: TableRecord) -> bytes:
    """Stable identity bytes for sync digests."""
    w = wire.Writer()
    if isinstance(record, ServiceEntry):
        w.u8(_KIND_ENTRY)
        w.ip4(record.key.vip).u16(record.key.port)
        w.raw(record.host.raw)
        w.lp16(record.app_id.encode())
    else:
        w.u8(_KIND_BINDING)
        w.raw(record.gateway.raw)
        w.u16(record.external_port)
    return w.getvalue()


def _record_order(record: TableRecord) -> tuple[int, HostId]:
    owner = record.host if isinstance(record, ServiceEntry) else record.gateway
    return (record.incarnation, owner)


class ServiceTable:
    """One node's view of the cluster's registrations.

    Mutated only from the owning node's event loop; snapshot() hands out
    immutable copies for anything that runs elsewhere.
    """

    def __init__(self, local_host: HostId) -> None:
        self.local_host = local_host
        self._entries: dict[EntryId, ServiceEntry] = {}
        self._bindings: dict[tuple[HostId, int], GatewayBinding] = {}
        self._binding_stamps: dict[tuple[HostId, int], int] = {}
        # Called with each record this node originates or re-owns, so the
        # gossip layer can queue it for dissemination.
        self.on_local_update: Optional[Callable[[TableRecord], None]] = None

    def _announce(self, record: TableRecord) -> None:
        if self.on_local_update is not None:
            self.on_local_update(record)

    # --- local registration ---

    def insert_local(self, entry: ServiceEntry, now: int) -> MergeOutcome:
        if entry.host != self.local_host:
            raise ValueError("insert_local is for entries this node owns")
        if entry.state is not EntryState.ALIVE:
            raise ValueError("insert_local only registers live entries")
        for resident in self._entries.values():
            if (
                resident.state is EntryState.ALIVE
                and resident.key == entry.key
                and resident.app_id == entry.app_id
            ):
                raise DuplicateAppBinding(
                    f"app {entry.app_id} already holds {entry.key}"
                )
        prior = self._entries.get(entry.entry_id)
        incarnation = prior.incarnation + 1 if prior else 1
        stored = replace(entry, incarnation=incarnation, stamp=now)
        self._entries[stored.entry_id] = stored
        self._announce(stored)
        return MergeOutcome.APPLIED

    def tombstone_entry(self, entry_id: EntryId, now: int) -> bool:
        resident = self._entries.get(entry_id)
        if resident is None or resident.state is not EntryState.ALIVE:
            return False
        stone = replace(
            resident,
            state=EntryState.TOMBSTONE,
            incarnation=resident.incarnation + 1,
            stamp=now,
        )
        self._entries[entry_id] = stone
        self._announce(stone)
        return True

    def tombstone_host(self, host: HostId, now: int) -> int:
        """Retire everything a dead node owned; returns the count tombstoned."""
        count = 0
        for entry_id, entry in list(self._entries.items()):
            if entry.host == host and entry.state is EntryState.ALIVE:
                self.tombstone_entry(entry_id, now)
                count += 1
        for binding in list(self._bindings.values()):
            if binding.gateway == host and binding.state is BindingState.ACTIVE:
                self.release_binding(binding.binding_id, now)
                count += 1
        return count

    def gc_tombstones(self, now: int, ttl: int = TOMBSTONE_TTL) -> int:
        removed = 0
        for entry_id, entry in list(self._entries.items()):
            if entry.state is EntryState.TOMBSTONE and now - entry.stamp > ttl:
                del self._entries[entry_id]
                removed += 1
        for binding_id, binding in list(self._bindings.items()):
            stamp = self._binding_stamps.get(binding_id, now)
            if binding.state is BindingState.RELEASED and now - stamp > ttl:
                del self._bindings[binding_id]
                self._binding_stamps.pop(binding_id, None)
                removed += 1
        return removed

    # --- replication ---

    def merge_remote(self, entry: ServiceEntry, now: int) -> MergeOutcome:
        resident = self._entries.get(entry.entry_id)
        if (
            entry.host == self.local_host
            and entry.state is EntryState.TOMBSTONE
            and resident is not None
            and resident.state is EntryState.ALIVE
            and entry.incarnation >= resident.incarnation
        ):
            # Someone believes our live registration is dead; re-own it above
            # the tombstone so the refutation wins everywhere.
            refreshed = replace(
                resident, incarnation=entry.incarnation + 1, stamp=now
            )
            self._entries[entry.entry_id] = refreshed
            self._announce(refreshed)
            return MergeOutcome.REFUTED
        if entry.host == self.local_host and resident is None:
            # A ghost of something we no longer own; the owner's view wins.
            return MergeOutcome.STALE
        if resident is not None and _record_order(entry) <= _record_order(resident):
            return MergeOutcome.STALE
        self._entries[entry.entry_id] = replace(entry, stamp=now)
        return MergeOutcome.APPLIED

    def merge_binding(self, binding: GatewayBinding, now: int) -> MergeOutcome:
        resident = self._bindings.get(binding.binding_id)
        if resident is not None and binding.incarnation <= resident.incarnation:
            return MergeOutcome.STALE
        self._bindings[binding.binding_id] = binding
        self._binding_stamps[binding.binding_id] = now
        return MergeOutcome.APPLIED

    def merge_record(self, record: TableRecord, now: int) -> MergeOutcome:
        if isinstance(record, ServiceEntry):
            return self.merge_remote(record, now)
        return self.merge_binding(record, now)

    # --- lookups ---

    def lookup(self, key: ServiceKey) -> list[ServiceEntry]:
        found = [
            e
            for e in self._entries.values()
            if e.key == key and e.state is EntryState.ALIVE
        ]
        found.sort(key=lambda e: (e.host, e.app_id))
        return found

    def lookup_name(self, name: str) -> Optional[IPv4Address]:
        wanted = name.lower()
        vips = {
            e.key.vip
            for e in self._entries.values()
            if e.state is EntryState.ALIVE and e.name and e.name.lower() == wanted
        }
        if not vips:
            return None
        if len(vips) > 1:
            raise AmbiguousName(f"name {name!r} maps to {sorted(map(str, vips))}")
        return vips.pop()

    def alive_entries(self) -> list[ServiceEntry]:
        return sorted(
            (e for e in self._entries.values() if e.state is EntryState.ALIVE),
            key=lambda e: (e.key, e.host, e.app_id),
        )

    def entries_for_app(self, host: HostId, app_id: str) -> list[ServiceEntry]:
        return [
            e
            for e in self._entries.values()
            if e.host == host and e.app_id == app_id and e.state is EntryState.ALIVE
        ]

    def auto_allocations(self) -> dict[IPv4Address, str]:
        """AutoPool vips currently claimed by live named entries."""
        return {
            e.key.vip: e.name
            for e in self._entries.values()
            if e.state is EntryState.ALIVE and e.name and e.key.vip in AUTO_POOL
        }

    def used_service_ports(self, vip: IPv4Address) -> set[int]:
        return {
            e.key.port
            for e in self._entries.values()
            if e.state is EntryState.ALIVE and e.key.vip == vip
        }

    def next_free_service_port(self, vip: IPv4Address) -> int:
        used = self.used_service_ports(vip)
        for port in range(SERVICE_PORT_MIN, SERVICE_PORT_MAX + 1):
            if port not in used:
                return port
        raise DuplicateAppBinding(f"no free service port under {vip}")

    # --- bindings ---

    def insert_binding(self, binding: GatewayBinding, now: int) -> GatewayBinding:
        prior = self._bindings.get(binding.binding_id)
        incarnation = prior.incarnation + 1 if prior else 1
        stored = replace(binding, incarnation=incarnation)
        self._bindings[stored.binding_id] = stored
        self._binding_stamps[stored.binding_id] = now
        self._announce(stored)
        return stored

    def release_binding(self, binding_id: tuple[HostId, int], now: int) -> bool:
        resident = self._bindings.get(binding_id)
        if resident is None or resident.state is not BindingState.ACTIVE:
            return False
        released = replace(
            resident,
            state=BindingState.RELEASED,
            incarnation=resident.incarnation + 1,
        )
        self._bindings[binding_id] = released
        self._binding_stamps[binding_id] = now
        self._announce(released)
        return True

    def active_bindings(self) -> list[GatewayBinding]:
        return sorted(
            (b for b in self._bindings.values() if b.state is BindingState.ACTIVE),
            key=lambda b: (b.gateway, b.external_port),
        )

    def binding_for_key(self, key: ServiceKey) -> Optional[GatewayBinding]:
        for binding in self.active_bindings():
            if binding.key == key:
                return binding
        return None

    def external_ports_taken(self, gateway: HostId) -> set[int]:
        return {
            b.external_port
            for b in self._bindings.values()
            if b.gateway == gateway and b.state is BindingState.ACTIVE
        }

    # --- sync support ---

    def records(self) -> list[TableRecord]:
        out: list[TableRecord] = list(self._entries.values())
        out.extend(self._bindings.values())
        return out

    def digest(self) -> list[tuple[bytes, int]]:
        return sorted(
            (record_id_bytes(r), r.incarnation) for r in self.records()
        )

    def records_newer_than(self, digest: Iterable[tuple[bytes, int]]) -> list[TableRecord]:
        """Records a peer with the given digest is missing or has stale."""
        theirs = dict(digest)
        out = []
        for record in self.records():
            known = theirs.get(record_id_bytes(record))
            if known is None or known < record.incarnation:
                out.append(record)
        out.sort(key=lambda r: record_id_bytes(r))
        return out

    def digest_has_news(self, digest: Iterable[tuple[bytes, int]]) -> bool:
        """True when the digest shows records we lack or have older."""
        mine = {record_id_bytes(r): r.incarnation for r in self.records()}
        for id_bytes, incarnation in digest:
            known = mine.get(id_bytes)
            if known is None or known < incarnation:
                return True
        return False

    # --- presentation ---

    def snapshot(self) -> list[ServiceEntry]:
        return sorted(
            self._entries.values(), key=lambda e: (e.key, e.host, e.app_id)
        )

    def dump(self) -> str:
        """One entry per line, tab-separated, in a stable order."""
        lines = []
        for e in self.snapshot():
            state = "alive" if e.state is EntryState.ALIVE else "tombstone"
            lines.append(
                "\t".join(
                    [
                        str(e.key),
                        str(e.real),
                        e.host.hex,
                        state,
                        str(e.incarnation),
                        e.name or "-",
                        str(e.tags),
                    ]
                )
            )
        return "\n".join(lines)
