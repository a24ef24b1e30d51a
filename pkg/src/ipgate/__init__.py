"""Per-client-IP web access gateway.

An intercepting HTTP proxy that judges every request by its source address,
a captive login service that grants time-limited sessions, a Squid-compatible
external ACL helper, and an in-process testbench for both gateway topologies.
"""

from .acl import AclEngine, AclPolicy, Action, PolicyMode, Verdict, match_domain
from .auth import AuthApp, AuthServiceSettings, handle_login, handle_logout, handle_status
from .clock import ClockFn, ManualClock, system_clock
from .credentials import (
    BackendUnavailableError,
    CredentialBackend,
    FlatFileBackend,
    LdapBackend,
    VerifyResult,
    hash_password,
)
from .httpmsg import RequestSummary, reconstruct_uri, summarize_request
from .proxy import ProxyService, render_deny_page
from .store import (
    AuthDecision,
    GroupMembership,
    InMemorySessionStore,
    SessionRecord,
    SessionStore,
    SqliteSessionStore,
    StoreUnavailableError,
    open_store,
)

__version__ = "1.0.0"

__all__ = [
    "AclEngine",
    "AclPolicy",
    "Action",
    "AuthApp",
    "AuthDecision",
    "AuthServiceSettings",
    "BackendUnavailableError",
    "ClockFn",
    "CredentialBackend",
    "FlatFileBackend",
    "GroupMembership",
    "InMemorySessionStore",
    "LdapBackend",
    "ManualClock",
    "PolicyMode",
    "ProxyService",
    "RequestSummary",
    "SessionRecord",
    "SessionStore",
    "SqliteSessionStore",
    "StoreUnavailableError",
    "Verdict",
    "VerifyResult",
    "handle_login",
    "handle_logout",
    "handle_status",
    "hash_password",
    "match_domain",
    "open_store",
    "reconstruct_uri",
    "render_deny_page",
    "summarize_request",
    "system_clock",
    "__version__",
]
