"""Credential backends: flat file with salted hashes, and LDAP bind + group search."""

from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from . import ldapclient
from .store import _check_identifier

PBKDF2_ITERATIONS = 600_000


class BackendUnavailableError(Exception):
    """The credential backend cannot be reached; logins must fail closed."""


class CredentialFileError(Exception):
    pass


@dataclass(frozen=True)
class VerifyResult:
    success: bool
    groups: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.success and self.groups:
            raise ValueError("failed verification must not carry groups")


class CredentialBackend(Protocol):
    def verify(self, user: str, password: str) -> VerifyResult: ...


def hash_password(password: str, *, iterations: int = PBKDF2_ITERATIONS, salt: bytes | None = None) -> str:
    """Salted PBKDF2-SHA256 in the form pbkdf2_sha256$iterations$salthex$hashhex."""
    if salt is None:
        salt = secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return f"pbkdf2_sha256${iterations}${salt.hex()}${digest.hex()}"


def check_password(password: str, stored: str) -> bool:
    """Constant-time comparison against a stored hash; malformed hashes never match."""
    try:
        scheme, iter_text, salt_hex, digest_hex = stored.split("$")
        if scheme != "pbkdf2_sha256":
            return False
        iterations = int(iter_text)
        salt = bytes.fromhex(salt_hex)
        expected = bytes.fromhex(digest_hex)
    except ValueError:
        return False
    actual = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return hmac.compare_digest(actual, expected)


def format_credential_line(user: str, password: str, groups: list[str] | tuple[str, ...],
                           *, iterations: int = PBKDF2_ITERATIONS) -> str:
    """Render one flat-file record: user:hash:group1,group2"""
    user = _check_identifier(user, "user")
    if ":" in user or "," in user:
        raise ValueError("user name must not contain ':' or ','")
    checked = [_check_identifier(g, "group") for g in groups]
    if not checked:
        raise ValueError("at least one group is required")
    for g in checked:
        if ":" in g or "," in g:
            raise ValueError("group name must not contain ':' or ','")
    return f"{user}:{hash_password(password, iterations=iterations)}:{','.join(checked)}"


@dataclass(frozen=True)
class _FlatRecord:
    password_hash: str
    groups: tuple[str, ...]


class FlatFileBackend:
    """Verifies against records of the form ``user:salted-hash:group1,group2``.

    Lines starting with '#' and blank lines are ignored. Every user needs at
    least one group. Lookups for unknown users still run one hash comparison so
    "no such user" is not distinguishable from "wrong password" by timing.
    """

    def __init__(self, records: dict[str, _FlatRecord]) -> None:
        self._records = records
        # Decoy hash for unknown users, matched to the cost of the real records.
        iterations = PBKDF2_ITERATIONS
        first = next(iter(records.values()), None)
        if first is not None:
            try:
                iterations = int(first.password_hash.split("$")[1])
            except (IndexError, ValueError):
                pass
        self._decoy = hash_password(secrets.token_hex(8), iterations=iterations)

    @classmethod
    def parse(cls, text: str, source: str = "<credentials>") -> "FlatFileBackend":
        records: dict[str, _FlatRecord] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(":", 2)
            if len(parts) != 3:
                raise CredentialFileError(
                    f"{source}:{lineno}: expected user:hash:groups, got {raw!r}"
                )
            user, password_hash, group_field = (p.strip() for p in parts)
            if not user:
                raise CredentialFileError(f"{source}:{lineno}: empty user name")
            if user in records:
                raise CredentialFileError(f"{source}:{lineno}: duplicate user {user!r}")
            groups = tuple(g.strip() for g in group_field.split(",") if g.strip())
            if not groups:
                raise CredentialFileError(f"{source}:{lineno}: user {user!r} has no groups")
            if not password_hash:
                raise CredentialFileError(f"{source}:{lineno}: empty password hash")
            records[user] = _FlatRecord(password_hash=password_hash, groups=groups)
        return cls(records)

    @classmethod
    def load(cls, path: str | Path) -> "FlatFileBackend":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CredentialFileError(f"cannot read credentials file {path}: {exc}") from exc
        return cls.parse(text, source=str(path))

    def verify(self, user: str, password: str) -> VerifyResult:
        record = self._records.get(user)
        if record is None:
            check_password(password, self._decoy)
            return VerifyResult(False)
        if not check_password(password, record.password_hash):
            return VerifyResult(False)
        return VerifyResult(True, record.groups)


class LdapBackend:
    """Authenticates by binding as the templated user DN, then reads group names
    from a configured group search. Network faults surface as
    BackendUnavailableError so callers can fail closed rather than deny."""

    def __init__(self, config: ldapclient.LdapDirectoryConfig) -> None:
        self.config = config

    def verify(self, user: str, password: str) -> VerifyResult:
        # An empty password would turn the simple bind into an anonymous bind,
        # which most directories accept. Reject it before it reaches the wire.
        if not user or not password:
            return VerifyResult(False)
        cfg = self.config
        dn = cfg.user_dn(user)
        try:
            client = ldapclient.LdapClient.connect(cfg.host, cfg.port, timeout=cfg.timeout)
        except ldapclient.LdapUnavailableError as exc:
            raise BackendUnavailableError(str(exc)) from exc
        try:
            if not client.simple_bind(dn, password):
                return VerifyResult(False)
            if cfg.group_base:
                names = client.search_attribute_values(
                    base=cfg.group_base,
                    filter_attr=cfg.group_member_attr,
                    filter_value=dn,
                    attribute=cfg.group_name_attr,
                )
                groups = tuple(dict.fromkeys(names))
                if not groups:
                    return VerifyResult(False)
                return VerifyResult(True, groups)
            assert cfg.default_group is not None
            return VerifyResult(True, (cfg.default_group,))
        except ldapclient.LdapUnavailableError as exc:
            raise BackendUnavailableError(str(exc)) from exc
        finally:
            client.close()
