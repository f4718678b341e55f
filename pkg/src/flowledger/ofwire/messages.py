"""OpenFlow 1.3 message codec for the subset the middleware relays.

Every message starts with the standard 8-byte header (version, type, length,
xid, big-endian).  Hello, Error, EchoRequest/Reply, FeaturesRequest and
FeaturesReply use the real OpenFlow 1.3 body layouts.  PacketIn, PacketOut and
FlowMod use simplified fixed-width bodies (no OXM TLVs): enough to express a
learning controller and drop/rate-limit defense rules while staying exactly
round-trippable, which the transparent relay depends on.

Messages with a type outside the subset decode to Passthrough, preserving the
raw bytes so the relay can forward them untouched.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Union

OFP_VERSION = 0x04  # OpenFlow 1.3

OFPT_HELLO = 0
OFPT_ERROR = 1
OFPT_ECHO_REQUEST = 2
OFPT_ECHO_REPLY = 3
OFPT_FEATURES_REQUEST = 5
OFPT_FEATURES_REPLY = 6
OFPT_PACKET_IN = 10
OFPT_PACKET_OUT = 13
OFPT_FLOW_MOD = 14

HEADER_LEN = 8
_HEADER = struct.Struct("!BBHI")
_FEATURES_BODY = struct.Struct("!QIBBxxII")
_ERROR_BODY = struct.Struct("!HH")
_PACKET_IN_FIXED = struct.Struct("!IIBxxx")
_PACKET_OUT_FIXED = struct.Struct("!IIHxx")
_FLOW_MOD_FIXED = struct.Struct("!HHHH")
_ACTION = struct.Struct("!BI")

OFP_NO_BUFFER = 0xFFFFFFFF
MAX_MESSAGE_LEN = 0xFFFF

# PacketIn reasons
OFPR_NO_MATCH = 0
OFPR_ACTION = 1

# Error types/codes (OpenFlow 1.3 values)
OFPET_HELLO_FAILED = 0
OFPET_BAD_REQUEST = 1
OFPHFC_INCOMPATIBLE = 0
OFPHFC_EPERM = 1
OFPBRC_BAD_TYPE = 1


class IncompleteMessage(Exception):
    """Not enough bytes buffered yet for a full message."""


class MalformedMessage(Exception):
    """Bytes cannot be a valid message (bad version, lying length, bad body)."""


class InvariantViolation(Exception):
    """Encode was handed a message whose header or body breaks its invariants."""


# -- address helpers ---------------------------------------------------------

def mac_str(mac: int) -> str:
    return ":".join(f"{(mac >> (8 * i)) & 0xFF:02x}" for i in range(5, -1, -1))


def mac_int(text: str) -> int:
    parts = text.split(":")
    if len(parts) != 6:
        raise ValueError(f"bad mac: {text!r}")
    value = 0
    for p in parts:
        value = (value << 8) | int(p, 16)
    return value


def ipv4_str(addr: int) -> str:
    return ".".join(str((addr >> (8 * i)) & 0xFF) for i in range(3, -1, -1))


def ipv4_int(text: str) -> int:
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad ipv4: {text!r}")
    value = 0
    for p in parts:
        octet = int(p)
        if not 0 <= octet <= 255:
            raise ValueError(f"bad ipv4: {text!r}")
        value = (value << 8) | octet
    return value


# -- match and actions --------------------------------------------------------

_F_IN_PORT = 0x01
_F_ETH_SRC = 0x02
_F_ETH_DST = 0x04
_F_IPV4_SRC = 0x08
_F_IPV4_DST = 0x10


@dataclass(frozen=True)
class Match:
    """Flow match; None means wildcard.  ipv4 fields are (address, prefix_len)."""

    in_port: Optional[int] = None
    eth_src: Optional[int] = None
    eth_dst: Optional[int] = None
    ipv4_src: Optional[tuple[int, int]] = None
    ipv4_dst: Optional[tuple[int, int]] = None

    def describe(self) -> str:
        parts = []
        if self.in_port is not None:
            parts.append(f"in_port={self.in_port}")
        if self.eth_src is not None:
            parts.append(f"eth_src={mac_str(self.eth_src)}")
        if self.eth_dst is not None:
            parts.append(f"eth_dst={mac_str(self.eth_dst)}")
        if self.ipv4_src is not None:
            parts.append(f"ipv4_src={ipv4_str(self.ipv4_src[0])}/{self.ipv4_src[1]}")
        if self.ipv4_dst is not None:
            parts.append(f"ipv4_dst={ipv4_str(self.ipv4_dst[0])}/{self.ipv4_dst[1]}")
        return ",".join(parts) if parts else "any"


def _encode_match(m: Match) -> bytes:
    flags = 0
    out = bytearray()
    if m.in_port is not None:
        flags |= _F_IN_PORT
        out += struct.pack("!I", m.in_port)
    if m.eth_src is not None:
        flags |= _F_ETH_SRC
        out += m.eth_src.to_bytes(6, "big")
    if m.eth_dst is not None:
        flags |= _F_ETH_DST
        out += m.eth_dst.to_bytes(6, "big")
    if m.ipv4_src is not None:
        flags |= _F_IPV4_SRC
        out += struct.pack("!IB", m.ipv4_src[0], m.ipv4_src[1])
    if m.ipv4_dst is not None:
        flags |= _F_IPV4_DST
        out += struct.pack("!IB", m.ipv4_dst[0], m.ipv4_dst[1])
    return bytes([flags]) + bytes(out)


def _decode_match(buf: memoryview, off: int) -> tuple[Match, int]:
    try:
        flags = buf[off]
        off += 1
        in_port = eth_src = eth_dst = None
        ipv4_src = ipv4_dst = None
        if flags & _F_IN_PORT:
            (in_port,) = struct.unpack_from("!I", buf, off)
            off += 4
        if flags & _F_ETH_SRC:
            eth_src = int.from_bytes(buf[off:off + 6], "big")
            off += 6
        if flags & _F_ETH_DST:
            eth_dst = int.from_bytes(buf[off:off + 6], "big")
            off += 6
        if flags & _F_IPV4_SRC:
            addr, plen = struct.unpack_from("!IB", buf, off)
            ipv4_src = (addr, plen)
            off += 5
        if flags & _F_IPV4_DST:
            addr, plen = struct.unpack_from("!IB", buf, off)
            ipv4_dst = (addr, plen)
            off += 5
    except (struct.error, IndexError) as exc:
        raise MalformedMessage(f"truncated match: {exc}") from exc
    if flags & ~(_F_IN_PORT | _F_ETH_SRC | _F_ETH_DST | _F_IPV4_SRC | _F_IPV4_DST):
        raise MalformedMessage(f"unknown match flags: {flags:#x}")
    return Match(in_port, eth_src, eth_dst, ipv4_src, ipv4_dst), off


_A_OUTPUT = 0
_A_FLOOD = 1
_A_DROP = 2


@dataclass(frozen=True)
class Output:
    port: int


@dataclass(frozen=True)
class Flood:
    pass


@dataclass(frozen=True)
class Drop:
    pass


Action = Union[Output, Flood, Drop]


def _encode_actions(actions: tuple[Action, ...]) -> bytes:
    out = bytearray()
    for act in actions:
        if isinstance(act, Output):
            out += _ACTION.pack(_A_OUTPUT, act.port)
        elif isinstance(act, Flood):
            out += _ACTION.pack(_A_FLOOD, 0)
        elif isinstance(act, Drop):
            out += _ACTION.pack(_A_DROP, 0)
        else:
            raise InvariantViolation(f"unknown action: {act!r}")
    return bytes(out)


def _decode_actions(buf: memoryview, off: int, count: int) -> tuple[tuple[Action, ...], int]:
    actions: list[Action] = []
    for _ in range(count):
        try:
            kind, arg = _ACTION.unpack_from(buf, off)
        except struct.error as exc:
            raise MalformedMessage(f"truncated actions: {exc}") from exc
        off += _ACTION.size
        if kind == _A_OUTPUT:
            actions.append(Output(arg))
        elif kind == _A_FLOOD:
            actions.append(Flood())
        elif kind == _A_DROP:
            actions.append(Drop())
        else:
            raise MalformedMessage(f"unknown action kind: {kind}")
    return tuple(actions), off


# -- message bodies ------------------------------------------------------------

@dataclass(frozen=True)
class OfHeader:
    version: int
    msg_type: int
    length: int
    xid: int


@dataclass(frozen=True)
class Hello:
    elements: bytes = b""


@dataclass(frozen=True)
class Error:
    err_type: int
    code: int
    data: bytes = b""


@dataclass(frozen=True)
class EchoRequest:
    data: bytes = b""


@dataclass(frozen=True)
class EchoReply:
    data: bytes = b""


@dataclass(frozen=True)
class FeaturesRequest:
    pass


@dataclass(frozen=True)
class FeaturesReply:
    datapath_id: int
    n_buffers: int = 256
    n_tables: int = 1
    auxiliary_id: int = 0
    capabilities: int = 0
    reserved: int = 0


@dataclass(frozen=True)
class PacketIn:
    buffer_id: int
    in_port: int
    reason: int
    frame: bytes = b""


@dataclass(frozen=True)
class PacketOut:
    buffer_id: int
    in_port: int
    actions: tuple[Action, ...] = ()
    frame: bytes = b""


@dataclass(frozen=True)
class FlowMod:
    match: Match
    priority: int = 0
    idle_timeout_s: int = 0
    hard_timeout_s: int = 0
    actions: tuple[Action, ...] = ()


@dataclass(frozen=True)
class Passthrough:
    """A message of a type outside the subset; raw holds the full wire bytes."""

    raw: bytes


Body = Union[
    Hello, Error, EchoRequest, EchoReply, FeaturesRequest, FeaturesReply,
    PacketIn, PacketOut, FlowMod, Passthrough,
]

_TYPE_FOR_BODY = {
    Hello: OFPT_HELLO,
    Error: OFPT_ERROR,
    EchoRequest: OFPT_ECHO_REQUEST,
    EchoReply: OFPT_ECHO_REPLY,
    FeaturesRequest: OFPT_FEATURES_REQUEST,
    FeaturesReply: OFPT_FEATURES_REPLY,
    PacketIn: OFPT_PACKET_IN,
    PacketOut: OFPT_PACKET_OUT,
    FlowMod: OFPT_FLOW_MOD,
}


@dataclass(frozen=True)
class OfMessage:
    header: OfHeader
    body: Body

    @property
    def xid(self) -> int:
        return self.header.xid

    @property
    def msg_type(self) -> int:
        return self.header.msg_type


# -- constructors ---------------------------------------------------------------

def _build(msg_type: int, xid: int, body: Body, body_bytes: bytes) -> OfMessage:
    return OfMessage(OfHeader(OFP_VERSION, msg_type, HEADER_LEN + len(body_bytes), xid), body)


def hello(xid: int, elements: bytes = b"") -> OfMessage:
    return _build(OFPT_HELLO, xid, Hello(elements), elements)


def error_msg(xid: int, err_type: int, code: int, data: bytes = b"") -> OfMessage:
    body = Error(err_type, code, data)
    return _build(OFPT_ERROR, xid, body, _encode_body(body))


def echo_request(xid: int, data: bytes = b"") -> OfMessage:
    return _build(OFPT_ECHO_REQUEST, xid, EchoRequest(data), data)


def echo_reply(xid: int, data: bytes = b"") -> OfMessage:
    return _build(OFPT_ECHO_REPLY, xid, EchoReply(data), data)


def features_request(xid: int) -> OfMessage:
    return _build(OFPT_FEATURES_REQUEST, xid, FeaturesRequest(), b"")


def features_reply(xid: int, datapath_id: int, n_buffers: int = 256, n_tables: int = 1,
                   auxiliary_id: int = 0, capabilities: int = 0, reserved: int = 0) -> OfMessage:
    body = FeaturesReply(datapath_id, n_buffers, n_tables, auxiliary_id, capabilities, reserved)
    return _build(OFPT_FEATURES_REPLY, xid, body, _encode_body(body))


def packet_in(xid: int, buffer_id: int, in_port: int, reason: int, frame: bytes = b"") -> OfMessage:
    body = PacketIn(buffer_id, in_port, reason, frame)
    return _build(OFPT_PACKET_IN, xid, body, _encode_body(body))


def packet_out(xid: int, buffer_id: int, in_port: int, actions: tuple[Action, ...],
               frame: bytes = b"") -> OfMessage:
    body = PacketOut(buffer_id, in_port, actions, frame)
    return _build(OFPT_PACKET_OUT, xid, body, _encode_body(body))


def flow_mod(xid: int, match: Match, priority: int, actions: tuple[Action, ...],
             idle_timeout_s: int = 0, hard_timeout_s: int = 0) -> OfMessage:
    body = FlowMod(match, priority, idle_timeout_s, hard_timeout_s, actions)
    return _build(OFPT_FLOW_MOD, xid, body, _encode_body(body))


# -- encode ---------------------------------------------------------------------

def _encode_body(body: Body) -> bytes:
    if isinstance(body, Hello):
        return body.elements
    if isinstance(body, Error):
        return _ERROR_BODY.pack(body.err_type, body.code) + body.data
    if isinstance(body, (EchoRequest, EchoReply)):
        return body.data
    if isinstance(body, FeaturesRequest):
        return b""
    if isinstance(body, FeaturesReply):
        return _FEATURES_BODY.pack(body.datapath_id, body.n_buffers, body.n_tables,
                                   body.auxiliary_id, body.capabilities, body.reserved)
    if isinstance(body, PacketIn):
        return _PACKET_IN_FIXED.pack(body.buffer_id, body.in_port, body.reason) + body.frame
    if isinstance(body, PacketOut):
        return (_PACKET_OUT_FIXED.pack(body.buffer_id, body.in_port, len(body.actions))
                + _encode_actions(body.actions) + body.frame)
    if isinstance(body, FlowMod):
        return (_FLOW_MOD_FIXED.pack(body.priority, body.idle_timeout_s, body.hard_timeout_s,
                                     len(body.actions))
                + _encode_match(body.match) + _encode_actions(body.actions))
    raise InvariantViolation(f"cannot encode body: {body!r}")


def encode(msg: OfMessage) -> bytes:
    """Serialize; header.length must equal the produced size."""
    if isinstance(msg.body, Passthrough):
        raw = msg.body.raw
        if len(raw) != msg.header.length or len(raw) < HEADER_LEN:
            raise InvariantViolation("passthrough raw bytes disagree with header length")
        return raw
    expected_type = _TYPE_FOR_BODY.get(type(msg.body))
    if expected_type is None or expected_type != msg.header.msg_type:
        raise InvariantViolation(
            f"body {type(msg.body).__name__} does not match msg_type {msg.header.msg_type}")
    body = _encode_body(msg.body)
    length = HEADER_LEN + len(body)
    if length != msg.header.length:
        raise InvariantViolation(f"header.length {msg.header.length} != actual {length}")
    if length > MAX_MESSAGE_LEN:
        raise InvariantViolation(f"message too long: {length}")
    return _HEADER.pack(msg.header.version, msg.header.msg_type, length, msg.header.xid) + body


# -- decode ---------------------------------------------------------------------

def _decode_known(header: OfHeader, body: memoryview, raw: bytes) -> Body:
    t = header.msg_type
    if t == OFPT_HELLO:
        return Hello(bytes(body))
    if t == OFPT_ERROR:
        if len(body) < _ERROR_BODY.size:
            raise MalformedMessage("error body too short")
        err_type, code = _ERROR_BODY.unpack_from(body, 0)
        return Error(err_type, code, bytes(body[_ERROR_BODY.size:]))
    if t == OFPT_ECHO_REQUEST:
        return EchoRequest(bytes(body))
    if t == OFPT_ECHO_REPLY:
        return EchoReply(bytes(body))
    if t == OFPT_FEATURES_REQUEST:
        if len(body) != 0:
            raise MalformedMessage("features_request carries a body")
        return FeaturesRequest()
    if t == OFPT_FEATURES_REPLY:
        if len(body) != _FEATURES_BODY.size:
            raise MalformedMessage(f"features_reply body must be {_FEATURES_BODY.size} bytes")
        dpid, n_buffers, n_tables, aux, caps, reserved = _FEATURES_BODY.unpack_from(body, 0)
        return FeaturesReply(dpid, n_buffers, n_tables, aux, caps, reserved)
    if t == OFPT_PACKET_IN:
        if len(body) < _PACKET_IN_FIXED.size:
            raise MalformedMessage("packet_in body too short")
        buffer_id, in_port, reason = _PACKET_IN_FIXED.unpack_from(body, 0)
        return PacketIn(buffer_id, in_port, reason, bytes(body[_PACKET_IN_FIXED.size:]))
    if t == OFPT_PACKET_OUT:
        if len(body) < _PACKET_OUT_FIXED.size:
            raise MalformedMessage("packet_out body too short")
        buffer_id, in_port, n_actions = _PACKET_OUT_FIXED.unpack_from(body, 0)
        actions, off = _decode_actions(body, _PACKET_OUT_FIXED.size, n_actions)
        return PacketOut(buffer_id, in_port, actions, bytes(body[off:]))
    if t == OFPT_FLOW_MOD:
        if len(body) < _FLOW_MOD_FIXED.size:
            raise MalformedMessage("flow_mod body too short")
        priority, idle_s, hard_s, n_actions = _FLOW_MOD_FIXED.unpack_from(body, 0)
        match, off = _decode_match(body, _FLOW_MOD_FIXED.size)
        actions, off = _decode_actions(body, off, n_actions)
        if off != len(body):
            raise MalformedMessage("flow_mod body has trailing bytes")
        return FlowMod(match, priority, idle_s, hard_s, actions)
    return Passthrough(raw)


def decode(data: bytes) -> tuple[OfMessage, bytes]:
    """Decode one message from the front of data; returns (message, remainder).

    Raises IncompleteMessage when fewer bytes than one full message are
    present, MalformedMessage when the bytes cannot be valid.
    """
    if len(data) < HEADER_LEN:
        raise IncompleteMessage(f"have {len(data)} bytes, need {HEADER_LEN} for a header")
    version, msg_type, length, xid = _HEADER.unpack_from(data, 0)
    if version != OFP_VERSION:
        raise MalformedMessage(f"unsupported version {version:#x}")
    if length < HEADER_LEN:
        raise MalformedMessage(f"header length {length} below minimum {HEADER_LEN}")
    if len(data) < length:
        raise IncompleteMessage(f"have {len(data)} bytes, header promises {length}")
    header = OfHeader(version, msg_type, length, xid)
    raw = bytes(data[:length])
    body = _decode_known(header, memoryview(raw)[HEADER_LEN:], raw)
    return OfMessage(header, body), bytes(data[length:])


class FrameBuffer:
    """Reassembles messages from an arbitrarily chunked byte stream.

    feed() returns the complete messages the new chunk unlocked, each paired
    with its exact wire bytes (so relays can forward the original bytes rather
    than re-encoding).  Partial trailing bytes stay buffered for the next feed.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[tuple[OfMessage, bytes]]:
        self._buf += chunk
        out: list[tuple[OfMessage, bytes]] = []
        while True:
            if len(self._buf) < HEADER_LEN:
                return out
            version, _, length, _ = _HEADER.unpack_from(self._buf, 0)
            if version != OFP_VERSION:
                raise MalformedMessage(f"unsupported version {version:#x}")
            if length < HEADER_LEN:
                raise MalformedMessage(f"header length {length} below minimum {HEADER_LEN}")
            if len(self._buf) < length:
                return out
            raw = bytes(self._buf[:length])
            del self._buf[:length]
            msg, rest = decode(raw)
            assert rest == b""
            out.append((msg, raw))

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
