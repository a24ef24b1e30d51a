"""INI configuration: parsing, validation, and wiring the configured pieces
into live objects (store, credential backend, ACL engine, services)."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlsplit

from .acl import AclEngine, AclPolicy, PolicyMode
from .auth import AuthServiceSettings
from .credentials import CredentialBackend, FlatFileBackend
from .ldapclient import LdapDirectoryConfig
from .store import SessionStore, open_store


class ConfigError(ValueError):
    """The configuration file cannot be used; the message says which key."""


def _parse_listen(text: str, *, where: str) -> tuple[str, int]:
    host, sep, port_text = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"{where}: expected host:port, got {text!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise ConfigError(f"{where}: bad port in {text!r}") from None
    if not 0 < port < 65536:
        raise ConfigError(f"{where}: port out of range in {text!r}")
    return host, port


def _parse_seconds(text: str, *, where: str, minimum: float = 0.0) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected a number of seconds, got {text!r}") from None
    if value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum:g}, got {text!r}")
    return value


def _parse_domains(text: str) -> tuple[str, ...]:
    return tuple(tok for tok in text.replace(",", " ").split() if tok)


def load_domains_file(path: str | Path) -> tuple[str, ...]:
    """One domain pattern per line; blank lines and #-comments are skipped."""
    domains: list[str] = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            domains.append(line)
    return tuple(domains)


@dataclass(frozen=True)
class ProxyConfig:
    listen_host: str = "0.0.0.0"
    listen_port: int = 3128
    login_url: str = ""
    upstream_timeout: float = 10.0


@dataclass(frozen=True)
class StoreConfig:
    locator: str = "memory:"
    inactivity_timeout: float | None = None


@dataclass(frozen=True)
class LoginConfig:
    listen_host: str = "0.0.0.0"
    listen_port: int = 8080
    max_duration: float = 86400.0
    duration_choices: tuple[int, ...] = (3600, 14400, 28800)
    portal_dir: str | None = None


@dataclass(frozen=True)
class CredentialsConfig:
    backend: str = "file"
    path: str | None = None
    ldap: LdapDirectoryConfig | None = None


@dataclass(frozen=True)
class AppConfig:
    proxy: ProxyConfig
    store: StoreConfig
    policy: AclPolicy
    login: LoginConfig
    credentials: CredentialsConfig
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def build_store(self) -> SessionStore:
        return open_store(self.store.locator, inactivity=self.store.inactivity_timeout)

    def build_backend(self) -> CredentialBackend:
        if self.credentials.backend == "ldap":
            from .credentials import LdapBackend

            assert self.credentials.ldap is not None
            return LdapBackend(self.credentials.ldap)
        assert self.credentials.path is not None
        return FlatFileBackend.load(self.credentials.path)

    def build_engine(self, store: SessionStore) -> AclEngine:
        return AclEngine(self.policy, store)

    def auth_settings(self) -> AuthServiceSettings:
        return AuthServiceSettings(
            max_duration=self.login.max_duration,
            duration_choices=self.login.duration_choices,
            portal_dir=self.login.portal_dir,
        )


def _get(parser: configparser.ConfigParser, section: str, key: str,
         default: str | None = None) -> str | None:
    if parser.has_option(section, key):
        return parser.get(section, key).strip()
    return default


def parse_config(text: str, *, base_dir: str | Path = ".") -> AppConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from None

    known = {"proxy", "store", "policy", "login", "credentials", "ldap"}
    warnings = [f"unknown section [{name}] ignored"
                for name in parser.sections() if name not in known]

    # [proxy]
    login_url = _get(parser, "proxy", "login-url")
    if not login_url:
        raise ConfigError("[proxy] login-url is required")
    url = urlsplit(login_url)
    if url.scheme != "http" or not url.hostname:
        raise ConfigError(f"[proxy] login-url must be an absolute http:// URL, got {login_url!r}")
    listen = _get(parser, "proxy", "listen", "0.0.0.0:3128")
    proxy_host, proxy_port = _parse_listen(listen, where="[proxy] listen")
    proxy_cfg = ProxyConfig(
        listen_host=proxy_host,
        listen_port=proxy_port,
        login_url=login_url,
        upstream_timeout=_parse_seconds(_get(parser, "proxy", "upstream-timeout", "10"),
                                        where="[proxy] upstream-timeout", minimum=0.1),
    )

    # [store]
    locator = _get(parser, "store", "locator", "memory:") or "memory:"
    if ":" in locator:
        scheme, _, rest = locator.partition(":")
        if scheme == "sqlite" and rest and not Path(rest).is_absolute():
            locator = f"sqlite:{Path(base_dir, rest)}"
    idle_text = _get(parser, "store", "inactivity-timeout", "0")
    idle = _parse_seconds(idle_text, where="[store] inactivity-timeout")
    store_cfg = StoreConfig(locator=locator, inactivity_timeout=idle or None)

    # [policy]
    mode_text = _get(parser, "policy", "mode")
    if not mode_text:
        raise ConfigError("[policy] mode is required (whitelist or blacklist)")
    try:
        mode = PolicyMode(mode_text.lower())
    except ValueError:
        raise ConfigError(f"[policy] mode must be whitelist or blacklist, got {mode_text!r}") from None
    domains = _parse_domains(_get(parser, "policy", "domains", "") or "")
    domains_file = _get(parser, "policy", "domains-file")
    if domains_file:
        path = Path(domains_file)
        if not path.is_absolute():
            path = Path(base_dir, domains_file)
        try:
            domains = domains + load_domains_file(path)
        except OSError as exc:
            raise ConfigError(f"[policy] domains-file: {exc}") from None
    ttl = _parse_seconds(_get(parser, "policy", "auth-cache-ttl", "300"),
                         where="[policy] auth-cache-ttl")
    policy = AclPolicy(
        mode=mode,
        domains=domains,
        auth_group=_get(parser, "policy", "auth-group", "internet") or "internet",
        auth_cache_ttl=ttl,
    )
    if mode is PolicyMode.WHITELIST and not domains:
        warnings.append("[policy] whitelist mode with no domains: only logged-in "
                        "clients will reach anything")

    # [login]
    login_listen = _get(parser, "login", "listen", "0.0.0.0:8080")
    login_host, login_port = _parse_listen(login_listen, where="[login] listen")
    choices_text = _get(parser, "login", "duration-choices", "3600 14400 28800") or ""
    try:
        choices = tuple(int(tok) for tok in choices_text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"[login] duration-choices must be integers, got {choices_text!r}") from None
    if not choices or any(c <= 0 for c in choices):
        raise ConfigError("[login] duration-choices must be positive integers")
    max_duration = _parse_seconds(_get(parser, "login", "max-duration", "86400"),
                                  where="[login] max-duration", minimum=1.0)
    portal_dir = _get(parser, "login", "portal-dir")
    if portal_dir and not Path(portal_dir).is_absolute():
        portal_dir = str(Path(base_dir, portal_dir))
    login_cfg = LoginConfig(
        listen_host=login_host,
        listen_port=login_port,
        max_duration=max_duration,
        duration_choices=choices,
        portal_dir=portal_dir or None,
    )
    if (url.port or 80) != login_port:
        warnings.append(f"[proxy] login-url points at port {url.port or 80} but the "
                        f"login service listens on {login_port}")

    # [credentials]
    backend = (_get(parser, "credentials", "backend", "file") or "file").lower()
    if backend == "file":
        cred_path = _get(parser, "credentials", "path")
        if not cred_path:
            raise ConfigError("[credentials] path is required for the file backend")
        if not Path(cred_path).is_absolute():
            cred_path = str(Path(base_dir, cred_path))
        creds = CredentialsConfig(backend="file", path=cred_path)
    elif backend == "ldap":
        host = _get(parser, "ldap", "host")
        user_dn = _get(parser, "ldap", "user-dn")
        if not host or not user_dn:
            raise ConfigError("[ldap] host and user-dn are required for the ldap backend")
        try:
            port_num = int(_get(parser, "ldap", "port", "389") or "389")
        except ValueError:
            raise ConfigError("[ldap] port must be an integer") from None
        try:
            directory = LdapDirectoryConfig(
                host=host,
                port=port_num,
                user_dn_template=user_dn,
                group_base=_get(parser, "ldap", "group-base") or None,
                group_member_attr=_get(parser, "ldap", "group-member-attr", "member") or "member",
                group_name_attr=_get(parser, "ldap", "group-name-attr", "cn") or "cn",
                default_group=_get(parser, "ldap", "default-group") or None,
                timeout=_parse_seconds(_get(parser, "ldap", "timeout", "5"),
                                       where="[ldap] timeout", minimum=0.1),
            )
        except ValueError as exc:
            raise ConfigError(f"[ldap] {exc}") from None
        creds = CredentialsConfig(backend="ldap", ldap=directory)
    else:
        raise ConfigError(f"[credentials] backend must be file or ldap, got {backend!r}")

    return AppConfig(proxy=proxy_cfg, store=store_cfg, policy=policy,
                     login=login_cfg, credentials=creds, warnings=tuple(warnings))


def load_config(path: str | Path) -> AppConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    return parse_config(text, base_dir=p.parent)


def check_config(path: str | Path) -> tuple[list[str], list[str]]:
    """Validate a config file: returns (errors, warnings). Empty errors means usable.

    Checks that go beyond parsing: the credential file must load, a configured
    portal directory must exist.
    """
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        return [str(exc)], []
    errors: list[str] = []
    warnings = list(cfg.warnings)
    if cfg.credentials.backend == "file" and cfg.credentials.path:
        try:
            FlatFileBackend.load(cfg.credentials.path)
        except Exception as exc:
            errors.append(f"[credentials] path: {exc}")
    if cfg.login.portal_dir and not Path(cfg.login.portal_dir).is_dir():
        warnings.append(f"[login] portal-dir {cfg.login.portal_dir!r} does not exist")
    return errors, warnings


EXAMPLE_CONFIG = """\
; Gateway access control: judged proxy plus captive login portal.

[proxy]
listen = 0.0.0.0:3128
; Where denied clients are sent to log in. The portal host is always
; reachable through the proxy regardless of policy mode.
login-url = http://192.0.2.1:8080/login
upstream-timeout = 10

[store]
; memory:            volatile, single process
; sqlite:PATH        shared between proxy and helper processes
locator = sqlite:/var/lib/ipgate/sessions.db
; End sessions after this many idle seconds (0 disables the idle check).
inactivity-timeout = 0

[policy]
; whitelist: listed domains are open to everyone, the rest need login.
; blacklist: listed domains are blocked, the rest are open; login overrides.
mode = whitelist
domains = example.org .wikipedia.org
; domains-file = /etc/ipgate/domains.txt
auth-group = internet
; Seconds a per-IP auth decision may be reused before the store is asked again.
auth-cache-ttl = 300

[login]
listen = 0.0.0.0:8080
max-duration = 86400
duration-choices = 3600 14400 28800
; portal-dir = /usr/share/ipgate/portal

[credentials]
backend = file
path = /etc/ipgate/users.txt
; backend = ldap uses the [ldap] section instead:
; [ldap]
; host = ldap.example.net
; port = 389
; user-dn = uid={user},ou=people,dc=example,dc=net
; group-base = ou=groups,dc=example,dc=net
; group-member-attr = member
; group-name-attr = cn
; default-group = internet
"""
