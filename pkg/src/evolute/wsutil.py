"""Minimal RFC 6455 WebSocket server support.

Just enough for a browser client to speak the session protocol: the upgrade
handshake, frame encode/decode with client masking, ping/pong, and close.
No extensions, no compression. Server frames are sent unmasked, as the RFC
requires.
"""

from __future__ import annotations

import base64
import hashlib
import struct

from .errors import ProtocolError

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONTINUATION = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def read_http_request(recv_exact, preread: bytes, limit: int = 16384) -> bytes:
    """Collect the upgrade request through the end of its headers."""
    data = bytearray(preread)
    while b"\r\n\r\n" not in data:
        if len(data) > limit:
            raise ProtocolError("oversized websocket handshake request")
        chunk = recv_exact(1)
        if not chunk:
            raise ProtocolError("connection closed during websocket handshake")
        data += chunk
    return bytes(data)


def parse_handshake(request: bytes) -> str:
    """Returns the Sec-WebSocket-Key; raises on a malformed upgrade."""
    try:
        head = request.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"undecodable websocket handshake: {exc}") from exc
    lines = head.split("\r\n")
    if not lines or "HTTP/1.1" not in lines[0]:
        raise ProtocolError("websocket handshake is not an HTTP/1.1 request")
    key = None
    upgrade = False
    for line in lines[1:]:
        name, _, value = line.partition(":")
        name = name.strip().lower()
        value = value.strip()
        if name == "sec-websocket-key":
            key = value
        elif name == "upgrade" and value.lower() == "websocket":
            upgrade = True
    if not upgrade or key is None:
        raise ProtocolError("missing websocket upgrade headers")
    return key


def handshake_response(client_key: str) -> bytes:
    return (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept_key(client_key)}\r\n"
        "\r\n"
    ).encode("ascii")


def encode_frame(payload: bytes, opcode: int = OP_BINARY, mask: bytes | None = None) -> bytes:
    header = bytearray([0x80 | opcode])
    length = len(payload)
    mask_bit = 0x80 if mask is not None else 0x00
    if length < 126:
        header.append(mask_bit | length)
    elif length < 1 << 16:
        header.append(mask_bit | 126)
        header += struct.pack("!H", length)
    else:
        header.append(mask_bit | 127)
        header += struct.pack("!Q", length)
    if mask is not None:
        if len(mask) != 4:
            raise ProtocolError("websocket mask must be 4 bytes")
        header += mask
        payload = apply_mask(payload, mask)
    return bytes(header) + payload


def apply_mask(payload: bytes, mask: bytes) -> bytes:
    repeated = (mask * (len(payload) // 4 + 1))[: len(payload)]
    return bytes(a ^ b for a, b in zip(payload, repeated))


def read_frame(recv_exact) -> tuple[bool, int, bytes] | None:
    """One raw frame as (fin, opcode, payload); None when the peer closed."""
    first = recv_exact(2)
    if not first or len(first) < 2:
        return None
    fin = bool(first[0] & 0x80)
    opcode = first[0] & 0x0F
    masked = bool(first[1] & 0x80)
    length = first[1] & 0x7F
    if length == 126:
        ext = recv_exact(2)
        if len(ext) < 2:
            raise ProtocolError("truncated websocket frame length")
        (length,) = struct.unpack("!H", ext)
    elif length == 127:
        ext = recv_exact(8)
        if len(ext) < 8:
            raise ProtocolError("truncated websocket frame length")
        (length,) = struct.unpack("!Q", ext)
    mask = b""
    if masked:
        mask = recv_exact(4)
        if len(mask) < 4:
            raise ProtocolError("truncated websocket mask")
    payload = recv_exact(length) if length else b""
    if len(payload) < length:
        raise ProtocolError("truncated websocket payload")
    if masked:
        payload = apply_mask(payload, mask)
    return fin, opcode, payload


def read_message(recv_exact, send_raw) -> bytes | None:
    """One complete data message, transparently answering pings and
    reassembling fragments. None on close."""
    assembled = bytearray()
    in_fragments = False
    while True:
        frame = read_frame(recv_exact)
        if frame is None:
            return None
        fin, opcode, payload = frame
        if opcode == OP_CLOSE:
            try:
                send_raw(encode_frame(b"", OP_CLOSE))
            except OSError:
                pass
            return None
        if opcode == OP_PING:
            send_raw(encode_frame(payload, OP_PONG))
            continue
        if opcode == OP_PONG:
            continue
        if opcode in (OP_TEXT, OP_BINARY):
            if in_fragments:
                raise ProtocolError("interleaved websocket message fragments")
            if fin:
                return payload
            assembled += payload
            in_fragments = True
        elif opcode == OP_CONTINUATION:
            if not in_fragments:
                raise ProtocolError("unexpected websocket continuation frame")
            assembled += payload
            if fin:
                return bytes(assembled)
        else:
            raise ProtocolError(f"unsupported websocket opcode {opcode}")
