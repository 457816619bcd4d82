"""Framed socket transport with per-type byte accounting.

Every framed packet's full length (header included) is attributed to its
packet type, so the per-type counters sum exactly to the bytes moved on the
socket.  Counters optionally mirror into a line-delimited net log:
`<timestamp_us> <tx|rx> <TYPE> <bytes>`.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections import defaultdict

from .. import protocol as P
from .timesync import now_us


class Connection:
    """Blocking framed reader/writer over a TCP socket."""

    def __init__(self, sock: socket.socket, name: str = "", netlog=None,
                 codec: P.Codec = P.DEFLATE):
        self.sock = sock
        self.name = name
        self.codec = codec
        self._netlog = netlog
        self._wlock = threading.Lock()
        self._counts_lock = threading.Lock()
        self.tx_by_type: dict[int, int] = defaultdict(int)
        self.rx_by_type: dict[int, int] = defaultdict(int)
        self.tx_total = 0
        self.rx_total = 0
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    # -- send ---------------------------------------------------------------

    def send_packet(self, ptype: int, payload: bytes, eos: bool = False) -> bytes:
        framed = P.encode_packet(ptype, payload, self.codec, eos=eos)
        self.send_framed(ptype, framed)
        return framed

    def send_framed(self, ptype: int, framed: bytes) -> None:
        with self._wlock:
            self.sock.sendall(framed)
        self._count("tx", ptype, len(framed))

    # -- receive ------------------------------------------------------------

    def recv_packet(self) -> tuple[int, bytes, bool] | None:
        """Reads one packet; None on orderly EOF.

        Raises ProtocolError on malformed frames, OSError on socket trouble.
        """
        header = self._recv_exact(P.HEADER.size)
        if header is None:
            return None
        magic, version, ptype, flags, _, body_len, uncomp = P.HEADER.unpack(header)
        if magic != P.MAGIC:
            raise P.BadMagic(f"bad magic {magic!r}")
        if version != P.VERSION:
            raise P.BadVersion(f"unsupported version {version}")
        try:
            P.PacketType(ptype)
        except ValueError as exc:
            raise P.CorruptPayload(f"unknown packet type 0x{ptype:02x}") from exc
        body = self._recv_exact(body_len)
        if body is None:
            raise P.Truncated("connection closed mid-frame")
        self._count("rx", ptype, P.HEADER.size + body_len)
        payload = P._inflate(flags, body, uncomp)
        return ptype, payload, bool(flags & P.FLAG_EOS)

    def _recv_exact(self, n: int) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except (ConnectionResetError, OSError):
                return None if not buf else None
            if not chunk:
                return None
            buf += chunk
        return bytes(buf)

    def _count(self, direction: str, ptype: int, nbytes: int) -> None:
        with self._counts_lock:
            if direction == "tx":
                self.tx_by_type[ptype] += nbytes
                self.tx_total += nbytes
            else:
                self.rx_by_type[ptype] += nbytes
                self.rx_total += nbytes
        if self._netlog is not None:
            try:
                name = P.PacketType(ptype).name
            except ValueError:
                name = f"0x{ptype:02x}"
            self._netlog.write(f"{now_us()} {direction} {name} {nbytes}\n")
            self._netlog.flush()

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def connect(address: tuple[str, int], **kwargs) -> Connection:
    sock = socket.create_connection(address, timeout=10.0)
    sock.settimeout(None)
    return Connection(sock, **kwargs)
