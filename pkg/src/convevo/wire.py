"""Length-prefixed framed message protocol for the socket transport.

Frame: u32 big-endian payload length, then the UTF-8 payload. The payload
is "<KIND>" or "<KIND> <body>", where body is the genome text record (WORK)
or the EvalRecord JSON object (RESULT):

    HELLO w3
    REQ w3
    WORK id=4f2a... parents= lr=0.01 momentum=0.9 batch_size=32 f0=conv:...
    RESULT {"genome_id": "4f2a...", "ok": true, ...}
    SHUTDOWN

Unknown kinds are rejected with ProtocolError.
"""

import struct

from .errors import ProtocolError

_LEN = struct.Struct(">I")

KINDS = ("HELLO", "REQ", "WORK", "RESULT", "SHUTDOWN")

MAX_FRAME = 16 * 1024 * 1024


def encode_message(kind, body=""):
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    text = f"{kind} {body}" if body else kind
    return text.encode("utf-8")


def decode_message(payload):
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError(f"payload is not valid UTF-8: {e}") from None
    kind, _, body = text.partition(" ")
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    return kind, body


def send_frame(sock, payload):
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds limit")
    sock.sendall(_LEN.pack(len(payload)) + payload)


def _recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def recv_frame(sock):
    """Returns payload bytes, or None on a clean EOF."""
    header = _recv_exact(sock, _LEN.size)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise ProtocolError(f"declared frame length {length} exceeds limit")
    if length == 0:
        return b""
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return payload


def send_message(sock, kind, body=""):
    send_frame(sock, encode_message(kind, body))


def recv_message(sock):
    payload = recv_frame(sock)
    if payload is None:
        return None
    return decode_message(payload)
