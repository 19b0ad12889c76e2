"""Real-socket runtime: one daemon per host over UDP, TCP, and Unix sockets.

All protocol state still lives in a plain Node driven by a single event loop
thread; everything else (ticker, gossip receiver, per-service acceptors,
per-app trap channels, sync exchanges, proxy pumps) runs on worker threads
that only talk to the loop through its queue. Connected sockets reach
applications as file descriptors passed over the app's Unix trap channel, so
established streams never touch the daemon again.
"""

from __future__ import annotations

import json
import os
import queue
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from ipaddress import IPv4Address
from pathlib import Path
from typing import Callable, Optional

from appnet import trap
from appnet.errors import (
    AppNetError,
    BindFailed,
    ConnRefused,
    DaemonUnreachable,
    DecodeError,
    WouldBlock,
)
from appnet.gossip import (
    PERIOD_MS,
    RELIABLE_KINDS,
    EnvelopeKind,
    decode_envelope,
    encode_envelope,
)
from appnet.model import HostId, RealEndpoint, parse_app_spec
from appnet.node import GatewaySession, Node, NodeConfig
from appnet.switch import PREAMBLE_SIZE, decode_preamble
from appnet.trap import Addr, SocketShim, TrapReply, TrapRequest

_SYNC_FRAME = struct.Struct(">I")
_WOULD_BLOCK = trap.status_for_error(WouldBlock(""))
CONNECT_TIMEOUT = 2.0
PREAMBLE_TIMEOUT = 2.0
COPY_CHUNK = 65536


class RuntimeStopped(RuntimeError):
    """The runtime shut down while a worker was waiting on its loop."""


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        buf += chunk
    return bytes(buf)


class RealFabric:
    """Socket-backed transports for one node's switch."""

    def __init__(self, runtime: "RealNodeRuntime") -> None:
        self.runtime = runtime
        self.host_ip = runtime.config.bind.host_ip

    def bind_stream(self, on_inbound) -> tuple[RealEndpoint, object]:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((str(self.host_ip), 0))
        listener.listen(16)
        endpoint = RealEndpoint(self.host_ip, listener.getsockname()[1])
        self.runtime.spawn(
            f"accept:{endpoint.port}",
            lambda: self._accept_loop(listener, on_inbound),
        )
        return endpoint, listener

    def _accept_loop(self, listener: socket.socket, on_inbound) -> None:
        while self.runtime.running:
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            self.runtime.spawn(
                "preamble", lambda c=conn: self._read_preamble(c, on_inbound)
            )

    def _read_preamble(self, conn: socket.socket, on_inbound) -> None:
        peer: Optional[Addr] = None
        try:
            conn.settimeout(PREAMBLE_TIMEOUT)
            peer = decode_preamble(_recv_exactly(conn, PREAMBLE_SIZE))
        except (OSError, ConnectionError):
            peer = None
        if peer is not None:
            conn.settimeout(None)
        self.runtime._post(lambda: on_inbound(conn, peer))

    def bind_dgram(self, on_dgram) -> tuple[RealEndpoint, object]:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind((str(self.host_ip), 0))
        endpoint = RealEndpoint(self.host_ip, sock.getsockname()[1])

        def receive_loop() -> None:
            while self.runtime.running:
                try:
                    data, _ = sock.recvfrom(65535)
                except OSError:
                    return
                peer = None
                payload = data
                if len(data) >= PREAMBLE_SIZE:
                    peer = decode_preamble(data[:PREAMBLE_SIZE])
                    if peer is not None:
                        payload = data[PREAMBLE_SIZE:]
                self.runtime._post(lambda p=peer, b=payload: on_dgram(p, b))

        self.runtime.spawn(f"dgram:{endpoint.port}", receive_loop)
        return endpoint, sock

    def close_listener(self, token: object) -> None:
        try:
            token.close()  # type: ignore[union-attr]
        except OSError:
            pass

    def connect_stream(self, dest: RealEndpoint, preamble: bytes) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.settimeout(CONNECT_TIMEOUT)
        try:
            sock.connect((str(dest.host_ip), dest.port))
            sock.sendall(preamble)
        except OSError as exc:
            sock.close()
            raise ConnRefused(f"connect to {dest} failed: {exc}") from exc
        sock.settimeout(None)
        return sock

    def open_local_pair(self) -> tuple[socket.socket, socket.socket]:
        return socket.socketpair()

    def send_dgram(self, dest: RealEndpoint, data: bytes) -> None:
        self.runtime.dgram_out.sendto(data, (str(dest.host_ip), dest.port))

    def bind_external(self, port: int, on_conn) -> object:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((str(self.host_ip), port))
        except OSError as exc:
            listener.close()
            raise BindFailed(f"external port {port}: {exc}") from exc
        listener.listen(16)

        def accept_loop() -> None:
            while self.runtime.running:
                try:
                    conn, _ = listener.accept()
                except OSError:
                    return
                self.runtime._post(lambda c=conn: on_conn(c))

        self.runtime.spawn(f"external:{port}", accept_loop)
        return listener


@dataclass
class _Waiter:
    event: threading.Event


class RealNodeRuntime:
    """Threads, sockets, and the event loop around one Node."""

    def __init__(self, config: NodeConfig, period_ms: int = PERIOD_MS) -> None:
        if config.run_dir is None:
            raise BindFailed("a run directory is required")
        self.config = config
        self.period_ms = period_ms
        self.run_dir = Path(config.run_dir)
        self.running = False
        self._threads: list[threading.Thread] = []
        self._events: "queue.Queue[tuple]" = queue.Queue()
        self._tick = 0
        self._wakeups: dict[tuple[str, int], threading.Event] = {}
        self._wakeup_lock = threading.Lock()
        self._app_servers: dict[str, socket.socket] = {}
        self._trap_conns: list[socket.socket] = []

        rng = random.Random(os.urandom(16).hex())
        host_id = HostId.generate(rng)
        self.fabric = RealFabric(self)
        self.node = Node(config, host_id, rng, self.fabric)
        self.node.start_pump = self._start_pump
        self.node.switch.on_deliverable = self._notify_deliverable

        self.gossip_udp: Optional[socket.socket] = None
        self.gossip_tcp: Optional[socket.socket] = None
        self.dgram_out: Optional[socket.socket] = None
        self.control: Optional[socket.socket] = None

    # --- lifecycle ---

    def start(self) -> "RealNodeRuntime":
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "apps").mkdir(exist_ok=True)
        (self.run_dir / "node_id").write_text(self.node.host.hex + "\n")
        bind = (str(self.config.bind.host_ip), self.config.bind.port)
        try:
            self.gossip_udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self.gossip_udp.bind(bind)
            self.gossip_tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self.gossip_tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self.gossip_tcp.bind(bind)
            self.gossip_tcp.listen(16)
        except OSError as exc:
            raise BindFailed(f"cannot bind {bind}: {exc}") from exc
        self.dgram_out = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.running = True
        self.spawn("loop", self._loop)
        self.spawn("ticker", self._ticker)
        self.spawn("gossip-udp", self._gossip_receive_loop)
        self.spawn("gossip-tcp", self._sync_accept_loop)
        self._start_control()
        return self

    def stop(self) -> None:
        self.running = False
        self._events.put(("stop",))
        with self._wakeup_lock:
            for event in self._wakeups.values():
                event.set()
        closing = [self.gossip_udp, self.gossip_tcp, self.dgram_out, self.control]
        closing += list(self._app_servers.values()) + list(self._trap_conns)
        for session in self.node.gateway_sessions:
            closing += [session.external, session.internal]
        for sock in closing:
            if isinstance(sock, socket.socket):
                try:
                    sock.close()
                except OSError:
                    pass
        # Workers are daemons; give them a moment to notice the closed
        # sockets but never hold shutdown hostage to a blocked recv.
        deadline = 1.0
        for thread in self._threads:
            if deadline <= 0:
                break
            started = time.monotonic()
            thread.join(timeout=min(0.1, deadline))
            deadline -= time.monotonic() - started

    def spawn(self, name: str, fn: Callable[[], None]) -> None:
        thread = threading.Thread(target=fn, name=f"appnet-{name}", daemon=True)
        thread.start()
        self._threads.append(thread)

    # --- the event loop ---

    def _loop(self) -> None:
        while True:
            event = self._events.get()
            kind = event[0]
            if kind == "stop":
                self._fail_pending_calls()
                return
            try:
                if kind == "tick":
                    self._tick += 1
                    self._send_outbound(self.node.tick(self._tick))
                elif kind == "envelope":
                    _, data, source = event
                    self._send_outbound(self.node.on_envelope(data, source, self._tick))
                elif kind == "run":
                    event[1]()
                elif kind == "call":
                    _, fn, box, done = event
                    try:
                        box.append(fn())
                    except BaseException as exc:  # handed back to the caller
                        box.append(exc)
                    done.set()
            except Exception:
                # A failed tick or envelope must not kill the loop.
                continue

    def _fail_pending_calls(self) -> None:
        while True:
            try:
                event = self._events.get_nowait()
            except queue.Empty:
                return
            if event[0] == "call":
                _, _fn, box, done = event
                box.append(RuntimeStopped("runtime stopped"))
                done.set()

    def _post(self, fn: Callable[[], object]) -> None:
        """Fire-and-forget execution on the loop thread."""
        if self.running:
            self._events.put(("run", fn))

    def in_loop(self, fn: Callable[[], object]) -> object:
        """Run fn on the loop thread and return its result."""
        if threading.current_thread().name == "appnet-loop":
            return fn()
        if not self.running:
            raise RuntimeStopped("runtime stopped")
        box: list = []
        done = threading.Event()
        self._events.put(("call", fn, box, done))
        while not done.wait(timeout=0.1):
            if not self.running and not done.is_set():
                raise RuntimeStopped("runtime stopped")
        result = box[0]
        if isinstance(result, BaseException):
            raise result
        return result

    def _ticker(self) -> None:
        while self.running:
            time.sleep(self.period_ms / 1000)
            self._events.put(("tick",))

    # --- gossip I/O ---

    def _gossip_receive_loop(self) -> None:
        while self.running:
            try:
                data, addr = self.gossip_udp.recvfrom(65535)
            except OSError:
                return
            source = RealEndpoint(IPv4Address(addr[0]), addr[1])
            self._events.put(("envelope", data, source))

    def _send_outbound(self, outbound) -> None:
        for dest, env in outbound:
            data = encode_envelope(env)
            if env.kind in RELIABLE_KINDS:
                self.spawn("sync-out", lambda d=dest, b=data: self._sync_exchange(d, b))
            else:
                try:
                    self.gossip_udp.sendto(data, (str(dest.host_ip), dest.port))
                except OSError:
                    pass

    def _sync_exchange(self, dest: RealEndpoint, frame: bytes) -> None:
        """Anti-entropy over a short-lived stream: send ours, merge theirs."""
        try:
            with socket.create_connection(
                (str(dest.host_ip), dest.port), timeout=CONNECT_TIMEOUT
            ) as conn:
                conn.sendall(_SYNC_FRAME.pack(len(frame)) + frame)
                conn.settimeout(CONNECT_TIMEOUT)
                self._drain_sync_frames(conn, dest)
        except OSError:
            return

    def _drain_sync_frames(self, conn: socket.socket, peer: RealEndpoint) -> None:
        while True:
            try:
                header = _recv_exactly(conn, _SYNC_FRAME.size)
                data = _recv_exactly(conn, _SYNC_FRAME.unpack(header)[0])
                replies = self.in_loop(
                    lambda d=data: self.node.on_envelope(d, peer, self._tick)
                )
            except (OSError, ConnectionError, RuntimeStopped):
                return
            for _, env in replies:
                out = encode_envelope(env)
                try:
                    conn.sendall(_SYNC_FRAME.pack(len(out)) + out)
                except OSError:
                    return

    def _sync_accept_loop(self) -> None:
        while self.running:
            try:
                conn, addr = self.gossip_tcp.accept()
            except OSError:
                return
            peer = RealEndpoint(IPv4Address(addr[0]), addr[1])
            self.spawn("sync-in", lambda c=conn, p=peer: self._sync_serve(c, p))

    def _sync_serve(self, conn: socket.socket, peer: RealEndpoint) -> None:
        with conn:
            conn.settimeout(CONNECT_TIMEOUT)
            self._drain_sync_frames(conn, peer)

    # --- trap channels ---

    def add_app(self, spec_args: list[str], app_id: Optional[str] = None) -> dict:
        spec = parse_app_spec(spec_args)
        identity = self.in_loop(lambda: self.node.add_app(spec, app_id))
        trap_path = self._serve_trap_channel(identity.app_id)
        return {
            "app_id": identity.app_id,
            "vip": str(identity.effective_vip),
            "trap": str(trap_path),
        }

    def remove_app(self, app_id: str) -> int:
        count = self.in_loop(lambda: self.node.remove_app(app_id))
        server = self._app_servers.pop(app_id, None)
        if server is not None:
            try:
                server.close()
            except OSError:
                pass
        return count

    def _serve_trap_channel(self, app_id: str) -> Path:
        app_dir = self.run_dir / "apps" / app_id
        app_dir.mkdir(parents=True, exist_ok=True)
        path = app_dir / "trap"
        if path.exists():
            path.unlink()
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(str(path))
        server.listen(1)
        self._app_servers[app_id] = server
        self.spawn(f"trap:{app_id}", lambda: self._trap_accept(server, app_id))
        return path

    def _trap_accept(self, server: socket.socket, app_id: str) -> None:
        attached = False
        while self.running:
            try:
                conn, _ = server.accept()
            except OSError:
                return
            if attached:
                conn.close()  # one sandbox channel per app
                continue
            attached = True
            self._trap_conns.append(conn)
            self.spawn(f"trap-serve:{app_id}", lambda c=conn: self._trap_serve(c, app_id))

    def _trap_serve(self, conn: socket.socket, app_id: str) -> None:
        with conn:
            while self.running:
                try:
                    header = _recv_exactly(conn, trap.HEADER_SIZE)
                    payload = _recv_exactly(conn, trap.frame_payload_length(header))
                except (OSError, ConnectionError):
                    break
                try:
                    request = trap.decode_request(header + payload)
                except DecodeError as exc:
                    self._trap_send(conn, trap.error_reply(exc), None)
                    continue
                try:
                    reply, transport = self._dispatch_blocking(app_id, request)
                except RuntimeStopped:
                    return
                self._trap_send(conn, reply, transport)
        # The application went away; withdraw whatever it registered.
        try:
            self.remove_app(app_id)
        except (AppNetError, RuntimeStopped):
            pass

    def _dispatch_blocking(
        self, app_id: str, request: TrapRequest
    ) -> tuple[TrapReply, object | None]:
        # Accept and recvfrom block the calling application, never the loop.
        while True:
            reply, transport = self.in_loop(
                lambda: self.node.dispatch_trap(app_id, request)
            )
            if reply.status != _WOULD_BLOCK:
                return reply, transport
            key = (app_id, request.handle)
            with self._wakeup_lock:
                event = self._wakeups.setdefault(key, threading.Event())
                event.clear()
            event.wait(timeout=0.25)

    def _notify_deliverable(self, app_id: str, handle_id: int) -> None:
        with self._wakeup_lock:
            event = self._wakeups.get((app_id, handle_id))
        if event is not None:
            event.set()

    def _trap_send(
        self, conn: socket.socket, reply: TrapReply, transport: object | None
    ) -> None:
        data = trap.encode_reply(reply)
        try:
            if isinstance(transport, socket.socket):
                socket.send_fds(conn, [data], [transport.fileno()])
                transport.close()  # the fd now lives with the application
            else:
                conn.sendall(data)
        except OSError:
            pass

    # --- gateway pump ---

    def _start_pump(self, session: GatewaySession) -> None:
        counter_lock = threading.Lock()

        def copy(src: socket.socket, dst: socket.socket, counter: str) -> None:
            try:
                while True:
                    chunk = src.recv(COPY_CHUNK)
                    if not chunk:
                        break
                    dst.sendall(chunk)
                    with counter_lock:
                        setattr(session, counter, getattr(session, counter) + len(chunk))
                        self.node.switch.data_path_bytes += len(chunk)
            except OSError:
                pass
            finally:
                session.closed = True
                for sock in (src, dst):
                    try:
                        sock.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass

        external, internal = session.external, session.internal
        assert isinstance(external, socket.socket) and isinstance(internal, socket.socket)
        self.spawn("pump-in", lambda: copy(external, internal, "ext_to_int"))
        self.spawn("pump-out", lambda: copy(internal, external, "int_to_ext"))

    # --- control channel ---

    def _start_control(self) -> None:
        path = self.run_dir / "control.sock"
        if path.exists():
            path.unlink()
        self.control = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.control.bind(str(path))
        self.control.listen(8)
        self.spawn("control", self._control_accept)

    def _control_accept(self) -> None:
        while self.running:
            try:
                conn, _ = self.control.accept()
            except OSError:
                return
            self.spawn("control-serve", lambda c=conn: self._control_serve(c))

    def _control_serve(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rw", encoding="utf-8") as stream:
            for line in stream:
                line = line.strip()
                if not line:
                    continue
                try:
                    response = self._control_handle(json.loads(line))
                except AppNetError as exc:
                    response = {"ok": False, "error": type(exc).__name__, "detail": str(exc)}
                except RuntimeStopped:
                    return
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    response = {"ok": False, "error": "BadRequest", "detail": str(exc)}
                stream.write(json.dumps(response) + "\n")
                stream.flush()

    def _control_handle(self, request: dict) -> dict:
        op = request["op"]
        if op == "ping":
            return {"ok": True, "host": self.node.host.hex}
        if op == "add":
            added = self.add_app(list(request["args"]))
            return {"ok": True, **added}
        if op == "remove":
            count = self.remove_app(request["app_id"])
            return {"ok": True, "tombstoned": count}
        if op == "list":
            dump = self.in_loop(self.node.dump)
            return {"ok": True, "dump": dump}
        return {"ok": False, "error": "BadRequest", "detail": f"unknown op {op!r}"}


class UnixTrapChannel:
    """The application-side trap channel: the generator half of the boundary.

    Connect with the path from APPNET_TRAP_SOCKET, wrap in SocketShim, and the
    process has its virtual network; transferred descriptors arrive as
    ancillary data and come back as ordinary sockets.
    """

    def __init__(self, path: str) -> None:
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.connect(path)
        self.messages = 0

    def call(self, req: TrapRequest) -> tuple[TrapReply, object | None]:
        self.messages += 1
        self.sock.sendall(trap.encode_request(req))
        header, fds = self._recv_header_with_fds()
        payload = (
            _recv_exactly(self.sock, trap.frame_payload_length(header))
            if trap.frame_payload_length(header)
            else b""
        )
        reply = trap.decode_reply(header + payload)
        transport = None
        if fds:
            transport = socket.socket(fileno=fds[0])
            for extra in fds[1:]:
                os.close(extra)
        return reply, transport

    def _recv_header_with_fds(self) -> tuple[bytes, list[int]]:
        buf = bytearray()
        fds: list[int] = []
        while len(buf) < trap.HEADER_SIZE:
            data, new_fds, _, _ = socket.recv_fds(
                self.sock, trap.HEADER_SIZE - len(buf), 4
            )
            if not data:
                raise ConnectionError("trap channel closed")
            buf += data
            fds.extend(new_fds)
        return bytes(buf), fds

    def close(self) -> None:
        self.sock.close()


def connect_shim(path: Optional[str] = None) -> SocketShim:
    """The one-liner for sandboxed programs: their virtual socket API."""
    path = path or os.environ.get("APPNET_TRAP_SOCKET")
    if not path:
        raise DaemonUnreachable("APPNET_TRAP_SOCKET is not set")
    return SocketShim(UnixTrapChannel(path))


class ControlClient:
    """CLI-side JSON-lines client for the daemon's control socket."""

    def __init__(self, run_dir: str) -> None:
        self.path = Path(run_dir) / "control.sock"

    def call(self, request: dict) -> dict:
        try:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.connect(str(self.path))
        except OSError as exc:
            raise DaemonUnreachable(f"no daemon at {self.path}: {exc}") from exc
        with sock, sock.makefile("rw", encoding="utf-8") as stream:
            stream.write(json.dumps(request) + "\n")
            stream.flush()
            line = stream.readline()
        if not line:
            raise DaemonUnreachable("daemon closed the control channel")
        return json.loads(line)
