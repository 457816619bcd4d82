"""Browser-facing gateway: pushes the exploration state over WebSocket.

Messages are binary WebSocket frames of the form [type u8][payload], where
the payload is the uncompressed wire serialization of the same packet type.
A connecting viewer receives a full mesh snapshot plus the latest dynamic
frame and pose, then live deltas; mesh traffic is reliable, dynamic frames
and poses are latest-wins.  Inbound POSE messages from the viewer are
forwarded upstream so other clients can display the user.

The WebSocket implementation is the minimal RFC 6455 subset browsers need:
HTTP upgrade handshake, unfragmented binary/text frames, ping/pong, close.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import socket
import struct
import threading

from .. import protocol as P
from .queues import ConnectionStalled, SendQueues

log = logging.getLogger(__name__)

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class WebSocketError(RuntimeError):
    pass


def _accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


class WebSocket:
    """One accepted (server-side) or initiated (client-side) connection."""

    def __init__(self, sock: socket.socket, mask_outgoing: bool):
        self.sock = sock
        self.mask_outgoing = mask_outgoing
        self._wlock = threading.Lock()

    # -- frame I/O -----------------------------------------------------------

    def send_binary(self, payload: bytes) -> None:
        self._send_frame(0x2, payload)

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        head = bytearray([0x80 | opcode])
        mask_bit = 0x80 if self.mask_outgoing else 0x00
        n = len(payload)
        if n < 126:
            head.append(mask_bit | n)
        elif n < 1 << 16:
            head.append(mask_bit | 126)
            head += struct.pack(">H", n)
        else:
            head.append(mask_bit | 127)
            head += struct.pack(">Q", n)
        if self.mask_outgoing:
            mask = b"\x13\x37\xbe\xef"
            head += mask
            payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        with self._wlock:
            self.sock.sendall(bytes(head) + payload)

    def recv_message(self) -> tuple[int, bytes] | None:
        """Returns (opcode, payload) or None once the peer closes."""
        while True:
            head = self._recv_exact(2)
            if head is None:
                return None
            fin = head[0] & 0x80
            opcode = head[0] & 0x0F
            masked = head[1] & 0x80
            n = head[1] & 0x7F
            if n == 126:
                ext = self._recv_exact(2)
                if ext is None:
                    return None
                (n,) = struct.unpack(">H", ext)
            elif n == 127:
                ext = self._recv_exact(8)
                if ext is None:
                    return None
                (n,) = struct.unpack(">Q", ext)
            mask = b"\x00" * 4
            if masked:
                mask = self._recv_exact(4)
                if mask is None:
                    return None
            payload = self._recv_exact(n) if n else b""
            if payload is None:
                return None
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if not fin:
                raise WebSocketError("fragmented frames unsupported")
            if opcode == 0x8:          # close
                return None
            if opcode == 0x9:          # ping -> pong
                self._send_frame(0xA, payload)
                continue
            if opcode == 0xA:          # pong
                continue
            return opcode, payload

    def _recv_exact(self, n: int) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError:
                return None
            if not chunk:
                return None
            buf += chunk
        return bytes(buf)

    def close(self):
        try:
            self._send_frame(0x8, b"")
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def websocket_connect(host: str, port: int, path: str = "/") -> WebSocket:
    """Plain client handshake (used by tests and tooling)."""
    sock = socket.create_connection((host, port), timeout=10.0)
    key = base64.b64encode(b"dynfuse-viewer-1").decode()
    request = (f"GET {path} HTTP/1.1\r\nHost: {host}:{port}\r\n"
               "Upgrade: websocket\r\nConnection: Upgrade\r\n"
               f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n")
    sock.sendall(request.encode())
    response = b""
    while b"\r\n\r\n" not in response:
        chunk = sock.recv(4096)
        if not chunk:
            raise WebSocketError("handshake failed: connection closed")
        response += chunk
    status = response.split(b"\r\n", 1)[0]
    if b"101" not in status:
        raise WebSocketError(f"handshake rejected: {status!r}")
    if _accept_key(key).encode() not in response:
        raise WebSocketError("bad accept key")
    sock.settimeout(None)
    return WebSocket(sock, mask_outgoing=True)


class ViewerGateway:
    """Pushes exploration-state updates to WebSocket viewers."""

    GATEWAY_TYPES = (P.PacketType.MC_BLOCKS, P.PacketType.BLOCK_REMOVE,
                     P.PacketType.DYN_FRAME, P.PacketType.POSE)

    def __init__(self, client, host: str = "127.0.0.1", port: int = 0):
        self.client = client          # ExplorationClient
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self.port = self._listener.getsockname()[1]
        self._viewers: list[tuple[WebSocket, SendQueues]] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)

    def start(self):
        self._accept_thread.start()

    def stop(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for ws, q in self._viewers:
                q.close()
                ws.close()

    # called by the exploration client for every applied packet
    def on_update(self, ptype: int, payload: bytes, event: dict):
        if ptype not in self.GATEWAY_TYPES:
            return
        with self._lock:
            if not self._viewers:
                return
            message = bytes([int(ptype)]) + payload
            for _, queues in self._viewers:
                try:
                    queues.offer(ptype, message)
                except ConnectionStalled:
                    queues.close()

    # -- connection handling ---------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(sock,),
                             daemon=True).start()

    def _serve(self, sock: socket.socket):
        try:
            ws = self._handshake(sock)
        except (WebSocketError, OSError) as exc:
            log.warning("viewer handshake failed: %s", exc)
            sock.close()
            return
        queues = SendQueues()
        with self._lock:
            # snapshot precedes deltas; the lock orders it against on_update
            for ptype, payload in self.client.state.snapshot_messages():
                queues.offer(ptype, bytes([int(ptype)]) + payload)
            dyn, pose = self.client.latest_realtime_payloads()
            if dyn is not None:
                queues.offer(P.PacketType.DYN_FRAME,
                             bytes([int(P.PacketType.DYN_FRAME)]) + dyn)
            if pose is not None:
                queues.offer(P.PacketType.POSE,
                             bytes([int(P.PacketType.POSE)]) + pose)
            self._viewers.append((ws, queues))

        writer = threading.Thread(target=self._write_loop, args=(ws, queues),
                                  daemon=True)
        writer.start()
        try:
            while not self._stop.is_set():
                got = ws.recv_message()
                if got is None:
                    break
                opcode, payload = got
                if opcode == 0x2 and payload:
                    self._handle_inbound(payload)
        finally:
            queues.close()
            with self._lock:
                self._viewers = [(w, q) for w, q in self._viewers if w is not ws]
            ws.close()

    def _write_loop(self, ws: WebSocket, queues: SendQueues):
        while True:
            message = queues.next_packet(timeout=0.5)
            if message is None:
                if self._stop.is_set():
                    return
                continue
            try:
                ws.send_binary(message)
            except OSError:
                queues.close()
                return

    def _handle_inbound(self, message: bytes):
        ptype = message[0]
        if ptype == P.PacketType.POSE and self.client.conn is not None:
            try:
                P.deserialize_pose(message[1:])
            except P.ProtocolError:
                return
            try:
                self.client.conn.send_packet(P.PacketType.POSE, message[1:])
            except OSError:
                pass

    def _handshake(self, sock: socket.socket) -> WebSocket:
        sock.settimeout(5.0)
        request = b""
        while b"\r\n\r\n" not in request:
            chunk = sock.recv(4096)
            if not chunk:
                raise WebSocketError("connection closed during handshake")
            request += chunk
        headers = {}
        for line in request.split(b"\r\n")[1:]:
            if b":" in line:
                k, v = line.split(b":", 1)
                headers[k.strip().lower()] = v.strip()
        key = headers.get(b"sec-websocket-key")
        if key is None or b"websocket" not in headers.get(b"upgrade", b"").lower():
            raise WebSocketError("not a websocket upgrade")
        accept = _accept_key(key.decode())
        sock.sendall((
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept}\r\n\r\n").encode())
        sock.settimeout(None)
        return WebSocket(sock, mask_outgoing=False)
