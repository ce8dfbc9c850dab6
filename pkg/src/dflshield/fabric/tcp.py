"""Real-socket transport with the same framing as the simulated backend.

Each endpoint keeps one persistent outbound TCP connection per destination
address (re-opened when a peer rotates) and a listener that spawns one
reader thread per inbound connection. The first frame on every outbound
connection is a small hello that names the sender, so deliveries carry the
sender's listening address exactly like the simulated backend.

Latency samples are not collected on this backend; loopback timing is
noise at desk scale. Loss counters record failed sends.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time

from .frames import (
    HEADER_LEN,
    AddressInUseError,
    ChannelClosedError,
    Delivery,
    Frame,
    FrameKind,
    FrameTooLargeError,
    MalformedFrameError,
    PeerAddress,
    RoutingError,
)
from .sim import FabricConfig
from .stats import StatsBook

_HELLO = b"HELO"
_CONNECT_TIMEOUT_S = 2.0


def _now_ms() -> float:
    return time.monotonic() * 1000.0


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class TcpEndpoint:
    def __init__(self, addr: PeerAddress, owner_id: int, config: FabricConfig, stats: StatsBook | None = None):
        self.address = addr
        self.owner_id = owner_id
        self.config = config
        self.stats = stats if stats is not None else StatsBook()
        self._inbox: "queue.Queue[Delivery]" = queue.Queue()
        self._conns: dict[PeerAddress, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._listeners: list[socket.socket] = []
        self._closed = False
        self._open_listener(addr)

    def _open_listener(self, addr: PeerAddress) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((addr.ip, addr.port))
        except OSError as exc:
            sock.close()
            raise AddressInUseError(f"{addr}: {exc}") from exc
        sock.listen(64)
        self._listeners.append(sock)
        threading.Thread(target=self._accept_loop, args=(sock,), daemon=True).start()

    def _accept_loop(self, listener: socket.socket) -> None:
        while True:
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket) -> None:
        peer_id = -1
        peer_addr: PeerAddress | None = None
        try:
            while True:
                head = _recv_exact(conn, HEADER_LEN)
                if head is None:
                    return
                (_, _, _, blen) = struct.unpack(">HBII", head)
                if blen > self.config.max_frame:
                    return
                body = _recv_exact(conn, blen) if blen else b""
                if body is None:
                    return
                frame = Frame.decode(head + body)
                t = _now_ms()
                if peer_addr is None:
                    # Connection preamble: "HELO" + sender id + listening address.
                    if frame.kind != FrameKind.CONTROL or not frame.body.startswith(_HELLO):
                        raise MalformedFrameError("missing connection hello")
                    peer_id = struct.unpack(">I", frame.body[4:8])[0]
                    peer_addr = PeerAddress.unpack(frame.body[8:14])
                    self.stats.on_received(peer_id, self.owner_id, frame.wire_size, 0.0, t)
                    continue
                self.stats.on_received(peer_id, self.owner_id, frame.wire_size, 0.0, t)
                self._inbox.put(Delivery(frame=frame, src=peer_addr, dst=self.address, recv_time=t))
        except (OSError, MalformedFrameError):
            return
        finally:
            conn.close()

    # -- sending ----------------------------------------------------------

    def _hello_frame(self) -> Frame:
        body = _HELLO + struct.pack(">I", self.owner_id) + self.address.packed()
        return Frame(kind=FrameKind.CONTROL, correlation_id=0, body=body)

    def _connect(self, to: PeerAddress, dst_hint: int) -> socket.socket:
        sock = socket.create_connection((to.ip, to.port), timeout=_CONNECT_TIMEOUT_S)
        sock.settimeout(None)
        hello = self._hello_frame()
        sock.sendall(hello.encode())
        self.stats.on_sent(self.owner_id, dst_hint, hello.wire_size, hello.kind, _now_ms())
        return sock

    def send_frame(self, to: PeerAddress, frame: Frame, dst_hint: int = -1) -> None:
        if self._closed:
            raise ChannelClosedError("endpoint closed")
        if frame.wire_size > self.config.max_frame:
            raise FrameTooLargeError(f"{frame.wire_size} B exceeds max_frame {self.config.max_frame}")
        blob = frame.encode()
        with self._conn_lock:
            for attempt in (0, 1):
                sock = self._conns.get(to)
                try:
                    if sock is None:
                        sock = self._connect(to, dst_hint)
                        self._conns[to] = sock
                    sock.sendall(blob)
                    self.stats.on_sent(self.owner_id, dst_hint, frame.wire_size, frame.kind, _now_ms())
                    return
                except OSError:
                    self._drop_conn(to)
                    if attempt == 1:
                        self.stats.on_sent(self.owner_id, dst_hint, frame.wire_size, frame.kind, _now_ms())
                        self.stats.on_lost(self.owner_id, dst_hint, _now_ms())
                        raise RoutingError(f"cannot reach {to}") from None

    def _drop_conn(self, to: PeerAddress) -> None:
        sock = self._conns.pop(to, None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def forget_peer(self, old_addr: PeerAddress) -> None:
        """Drop the cached connection to an address a peer has rotated away from."""
        with self._conn_lock:
            self._drop_conn(old_addr)

    # -- receiving / lifecycle --------------------------------------------

    def recv_frame(self, timeout_ms: float) -> Delivery | None:
        if self._closed and self._inbox.empty():
            raise ChannelClosedError("endpoint closed")
        try:
            return self._inbox.get(timeout=max(0.0, timeout_ms) / 1000.0)
        except queue.Empty:
            return None

    def poll(self, deadline: float) -> list[Delivery]:
        """Drain everything currently queued (deadline is ignored on real sockets)."""
        out = []
        while True:
            try:
                out.append(self._inbox.get_nowait())
            except queue.Empty:
                return out

    def rebind(self, new_addr: PeerAddress, grace_ms: float = 0.0) -> None:
        if self._closed:
            raise ChannelClosedError("endpoint closed")
        old = list(self._listeners)
        self._listeners = []
        self._open_listener(new_addr)
        self.address = new_addr

        def _close_old():
            for sock in old:
                try:
                    sock.close()
                except OSError:
                    pass

        if grace_ms > 0:
            threading.Timer(grace_ms / 1000.0, _close_old).start()
        else:
            _close_old()

    def close(self) -> None:
        self._closed = True
        for sock in self._listeners:
            try:
                sock.close()
            except OSError:
                pass
        with self._conn_lock:
            for addr in list(self._conns):
                self._drop_conn(addr)
