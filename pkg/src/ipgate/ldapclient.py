"""Minimal LDAPv3 client: simple bind and a single-attribute equality search.

Covers exactly what IP-session login needs (bind as the user's DN, then list
the groups naming that DN as a member) without an external LDAP dependency.
BER encoding is restricted to the handful of types those two operations use.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass
from typing import BinaryIO

RESULT_SUCCESS = 0
RESULT_INVALID_CREDENTIALS = 49

_TAG_INTEGER = 0x02
_TAG_OCTET_STRING = 0x04
_TAG_ENUMERATED = 0x0A
_TAG_BOOLEAN = 0x01
_TAG_SEQUENCE = 0x30
_TAG_SET = 0x31
_TAG_BIND_REQUEST = 0x60
_TAG_BIND_RESPONSE = 0x61
_TAG_UNBIND_REQUEST = 0x42
_TAG_SEARCH_REQUEST = 0x63
_TAG_SEARCH_ENTRY = 0x64
_TAG_SEARCH_DONE = 0x65
_TAG_SIMPLE_AUTH = 0x80
_TAG_EQUALITY_FILTER = 0xA3


class LdapError(Exception):
    pass


class LdapUnavailableError(LdapError):
    """Directory unreachable or not speaking LDAP; callers must fail closed."""


class LdapProtocolError(LdapUnavailableError):
    pass


def ber_length(n: int) -> bytes:
    if n < 0x80:
        return bytes([n])
    raw = n.to_bytes((n.bit_length() + 7) // 8, "big")
    return bytes([0x80 | len(raw)]) + raw


def ber_tlv(tag: int, content: bytes) -> bytes:
    return bytes([tag]) + ber_length(len(content)) + content


def ber_int(tag: int, value: int) -> bytes:
    if value < 0:
        raise ValueError("negative integers not needed by this client")
    raw = value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")
    if raw[0] & 0x80:
        raw = b"\x00" + raw
    return ber_tlv(tag, raw)


def ber_octets(tag: int, value: bytes | str) -> bytes:
    if isinstance(value, str):
        value = value.encode("utf-8")
    return ber_tlv(tag, value)


def ber_bool(value: bool) -> bytes:
    return ber_tlv(_TAG_BOOLEAN, b"\xff" if value else b"\x00")


class BerReader:
    """Walks the TLVs inside one constructed BER value."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def at_end(self) -> bool:
        return self._pos >= len(self._data)

    def read(self) -> tuple[int, bytes]:
        data, pos = self._data, self._pos
        if pos >= len(data):
            raise LdapProtocolError("truncated BER element")
        tag = data[pos]
        pos += 1
        if pos >= len(data):
            raise LdapProtocolError("truncated BER length")
        first = data[pos]
        pos += 1
        if first & 0x80:
            n = first & 0x7F
            if n == 0 or n > 4 or pos + n > len(data):
                raise LdapProtocolError("unsupported BER length form")
            length = int.from_bytes(data[pos : pos + n], "big")
            pos += n
        else:
            length = first
        if pos + length > len(data):
            raise LdapProtocolError("BER value overruns its container")
        content = data[pos : pos + length]
        self._pos = pos + length
        return tag, content

    def expect(self, tag: int, what: str) -> bytes:
        got, content = self.read()
        if got != tag:
            raise LdapProtocolError(f"expected {what} (tag 0x{tag:02x}), got tag 0x{got:02x}")
        return content


def decode_int(content: bytes) -> int:
    if not content:
        raise LdapProtocolError("empty integer")
    return int.from_bytes(content, "big", signed=True)


def read_ber_tlv(rfile: BinaryIO) -> tuple[int, bytes]:
    """Read one top-level TLV from a binary stream."""
    head = rfile.read(1)
    if not head:
        raise LdapProtocolError("connection closed by directory server")
    tag = head[0]
    first_raw = rfile.read(1)
    if not first_raw:
        raise LdapProtocolError("truncated BER length")
    first = first_raw[0]
    if first & 0x80:
        n = first & 0x7F
        if n == 0 or n > 4:
            raise LdapProtocolError("unsupported BER length form")
        raw = rfile.read(n)
        if len(raw) < n:
            raise LdapProtocolError("truncated BER length")
        length = int.from_bytes(raw, "big")
    else:
        length = first
    content = rfile.read(length)
    if len(content) < length:
        raise LdapProtocolError("truncated BER value")
    return tag, content


def escape_dn_value(value: str) -> str:
    """Escape one attribute value for splicing into a DN template (RFC 4514)."""
    out = []
    for ch in value:
        if ch in ',+"\\<>;=':
            out.append("\\" + ch)
        elif ch in ("\x00",):
            out.append("\\00")
        else:
            out.append(ch)
    text = "".join(out)
    if text.startswith(" ") or text.startswith("#"):
        text = "\\" + text
    if text.endswith(" "):
        text = text[:-1] + "\\ "
    return text


@dataclass(frozen=True)
class LdapDirectoryConfig:
    host: str
    port: int = 389
    user_dn_template: str = "uid={user},ou=people,dc=example,dc=com"
    group_base: str | None = None
    group_member_attr: str = "member"
    group_name_attr: str = "cn"
    default_group: str | None = None
    timeout: float = 5.0

    def __post_init__(self) -> None:
        if "{user}" not in self.user_dn_template:
            raise ValueError("user_dn_template must contain {user}")
        if self.group_base is None and self.default_group is None:
            raise ValueError("configure either a group search base or a default group")

    def user_dn(self, user: str) -> str:
        return self.user_dn_template.format(user=escape_dn_value(user))


def encode_bind_request(message_id: int, dn: str, password: str) -> bytes:
    op = ber_tlv(
        _TAG_BIND_REQUEST,
        ber_int(_TAG_INTEGER, 3)
        + ber_octets(_TAG_OCTET_STRING, dn)
        + ber_octets(_TAG_SIMPLE_AUTH, password),
    )
    return ber_tlv(_TAG_SEQUENCE, ber_int(_TAG_INTEGER, message_id) + op)


def encode_search_request(
    message_id: int, base: str, filter_attr: str, filter_value: str, attribute: str
) -> bytes:
    search_filter = ber_tlv(
        _TAG_EQUALITY_FILTER,
        ber_octets(_TAG_OCTET_STRING, filter_attr) + ber_octets(_TAG_OCTET_STRING, filter_value),
    )
    op = ber_tlv(
        _TAG_SEARCH_REQUEST,
        ber_octets(_TAG_OCTET_STRING, base)
        + ber_int(_TAG_ENUMERATED, 2)  # wholeSubtree
        + ber_int(_TAG_ENUMERATED, 0)  # neverDerefAliases
        + ber_int(_TAG_INTEGER, 0)
        + ber_int(_TAG_INTEGER, 0)
        + ber_bool(False)
        + search_filter
        + ber_tlv(_TAG_SEQUENCE, ber_octets(_TAG_OCTET_STRING, attribute)),
    )
    return ber_tlv(_TAG_SEQUENCE, ber_int(_TAG_INTEGER, message_id) + op)


def encode_unbind_request(message_id: int) -> bytes:
    return ber_tlv(
        _TAG_SEQUENCE, ber_int(_TAG_INTEGER, message_id) + ber_tlv(_TAG_UNBIND_REQUEST, b"")
    )


def decode_result_code(op_content: bytes) -> int:
    reader = BerReader(op_content)
    return decode_int(reader.expect(_TAG_ENUMERATED, "result code"))


class LdapClient:
    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._rfile: BinaryIO = sock.makefile("rb")
        self._next_id = 1

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0) -> "LdapClient":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise LdapUnavailableError(f"cannot reach directory {host}:{port}: {exc}") from exc
        sock.settimeout(timeout)
        return cls(sock)

    def close(self) -> None:
        try:
            self._sock.sendall(encode_unbind_request(self._take_id()))
        except OSError:
            pass
        try:
            self._rfile.close()
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass

    def _take_id(self) -> int:
        mid = self._next_id
        self._next_id += 1
        return mid

    def _send(self, payload: bytes) -> None:
        try:
            self._sock.sendall(payload)
        except OSError as exc:
            raise LdapUnavailableError(f"directory connection lost: {exc}") from exc

    def _read_message(self, expect_id: int) -> tuple[int, bytes]:
        """Read LDAP messages until one matches expect_id; returns (op tag, op content)."""
        while True:
            try:
                tag, content = read_ber_tlv(self._rfile)
            except OSError as exc:
                raise LdapUnavailableError(f"directory connection lost: {exc}") from exc
            if tag != _TAG_SEQUENCE:
                raise LdapProtocolError(f"unexpected top-level tag 0x{tag:02x}")
            reader = BerReader(content)
            message_id = decode_int(reader.expect(_TAG_INTEGER, "message id"))
            op_tag, op_content = reader.read()
            if message_id == expect_id:
                return op_tag, op_content

    def simple_bind(self, dn: str, password: str) -> bool:
        """True on a successful bind, False when the directory rejects the credentials."""
        mid = self._take_id()
        self._send(encode_bind_request(mid, dn, password))
        op_tag, op_content = self._read_message(mid)
        if op_tag != _TAG_BIND_RESPONSE:
            raise LdapProtocolError(f"expected bind response, got tag 0x{op_tag:02x}")
        return decode_result_code(op_content) == RESULT_SUCCESS

    def search_attribute_values(
        self, base: str, filter_attr: str, filter_value: str, attribute: str
    ) -> list[str]:
        """Equality search returning every value of one attribute across matching entries."""
        mid = self._take_id()
        self._send(encode_search_request(mid, base, filter_attr, filter_value, attribute))
        wanted = attribute.lower()
        values: list[str] = []
        while True:
            op_tag, op_content = self._read_message(mid)
            if op_tag == _TAG_SEARCH_ENTRY:
                reader = BerReader(op_content)
                reader.expect(_TAG_OCTET_STRING, "entry DN")
                attrs = BerReader(reader.expect(_TAG_SEQUENCE, "attribute list"))
                while not attrs.at_end():
                    attr = BerReader(attrs.expect(_TAG_SEQUENCE, "attribute"))
                    name = attr.expect(_TAG_OCTET_STRING, "attribute name").decode("utf-8")
                    vals = BerReader(attr.expect(_TAG_SET, "attribute values"))
                    while not vals.at_end():
                        value = vals.expect(_TAG_OCTET_STRING, "attribute value")
                        if name.lower() == wanted:
                            values.append(value.decode("utf-8"))
            elif op_tag == _TAG_SEARCH_DONE:
                if decode_result_code(op_content) != RESULT_SUCCESS:
                    return []
                return values
            # anything else (references, notices) is skipped
