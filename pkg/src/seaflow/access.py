"""Identity provider and access-control management.

Tokens are opaque bearer strings ``<base64url(body)>.<hex hmac-sha256>``
where ``body`` is canonical JSON (sorted keys, no whitespace). The same
token authenticates push-ingest requests, broker CONNECTs (as the
password) and data-space queries.

Grants carry an action and a scope. A scope is either an MQTT topic
filter or a set of data categories; a category ``c`` and the topic
subtree ``data/<c>/#`` are interchangeable, so the push path
(subscriptions) and the pull path (queries) reach the same decision.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable

from seaflow.broker.topics import InvalidTopic, filter_covers, validate_filter
from seaflow.model import DataCategory

SECRET_ENV = "SEAFLOW_SECRET"


class Role(str, Enum):
    PRODUCER = "producer"
    CONSUMER = "consumer"
    OPERATOR = "operator"


class Action(str, Enum):
    PUBLISH = "publish"
    SUBSCRIBE = "subscribe"
    QUERY_PULL = "query_pull"
    INGEST = "ingest"


ROLE_ACTIONS = {
    Role.PRODUCER: {Action.PUBLISH, Action.INGEST},
    Role.CONSUMER: {Action.SUBSCRIBE, Action.QUERY_PULL},
    Role.OPERATOR: set(Action),
}


class AccessError(Exception):
    pass


class UnknownPrincipal(AccessError):
    pass


class GrantExceedsRole(AccessError):
    pass


class InvalidToken(AccessError):
    pass


class BadSignature(InvalidToken):
    pass


class Expired(InvalidToken):
    pass


@dataclass(frozen=True)
class Principal:
    principal_id: str
    org_id: str
    roles: frozenset[Role]

    def __post_init__(self):
        if not self.roles:
            raise ValueError(f"principal {self.principal_id!r} needs at least one role")

    def has(self, role: Role) -> bool:
        return role in self.roles

    def to_dict(self) -> dict:
        return {"principal_id": self.principal_id, "org_id": self.org_id,
                "roles": sorted(r.value for r in self.roles)}

    @classmethod
    def from_dict(cls, data: dict) -> "Principal":
        return cls(data["principal_id"], data["org_id"],
                   frozenset(Role(r) for r in data["roles"]))


@dataclass(frozen=True)
class Grant:
    action: Action
    topic_filter: str | None = None
    categories: frozenset[DataCategory] | None = None

    def __post_init__(self):
        if (self.topic_filter is None) == (self.categories is None):
            raise ValueError("a grant is scoped by exactly one of topic_filter or categories")
        if self.topic_filter is not None:
            validate_filter(self.topic_filter)

    @classmethod
    def topics(cls, action: Action | str, topic_filter: str) -> "Grant":
        return cls(Action(action), topic_filter=topic_filter)

    @classmethod
    def for_categories(cls, action: Action | str, categories: Iterable[DataCategory | str]) -> "Grant":
        return cls(Action(action), categories=frozenset(DataCategory(c) for c in categories))

    def to_dict(self) -> dict:
        if self.topic_filter is not None:
            return {"action": self.action.value, "topic_filter": self.topic_filter}
        return {"action": self.action.value,
                "categories": sorted(c.value for c in self.categories or ())}

    @classmethod
    def from_dict(cls, data: dict) -> "Grant":
        if "topic_filter" in data:
            return cls.topics(data["action"], data["topic_filter"])
        return cls.for_categories(data["action"], data["categories"])


@dataclass(frozen=True)
class Token:
    token_id: str
    principal_id: str
    grants: tuple[Grant, ...]
    issued_at: int
    expires_at: int
    signature: str = ""

    def body(self) -> bytes:
        return json.dumps({
            "token_id": self.token_id,
            "principal_id": self.principal_id,
            "grants": [g.to_dict() for g in self.grants],
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
        }, sort_keys=True, separators=(",", ":")).encode()

    def encode(self) -> str:
        return base64.urlsafe_b64encode(self.body()).decode().rstrip("=") + "." + self.signature

    @classmethod
    def decode(cls, text: str) -> "Token":
        try:
            body_b64, signature = text.rsplit(".", 1)
            body = base64.urlsafe_b64decode(body_b64 + "=" * (-len(body_b64) % 4))
            data = json.loads(body)
            return cls(
                token_id=data["token_id"],
                principal_id=data["principal_id"],
                grants=tuple(Grant.from_dict(g) for g in data["grants"]),
                issued_at=int(data["issued_at"]),
                expires_at=int(data["expires_at"]),
                signature=signature,
            )
        except (ValueError, KeyError, TypeError, InvalidTopic) as exc:
            raise InvalidToken(f"malformed token: {exc}") from exc


@dataclass(frozen=True)
class Identity:
    """A verified principal together with the grants its token carried."""

    principal: Principal
    grants: tuple[Grant, ...]


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def _mac(secret: bytes, body: bytes) -> str:
    return hmac.new(secret, body, hashlib.sha256).hexdigest()


@dataclass
class PrincipalStore:
    principals: dict[str, Principal] = field(default_factory=dict)

    def add(self, principal: Principal) -> Principal:
        self.principals[principal.principal_id] = principal
        return principal

    def get(self, principal_id: str) -> Principal:
        try:
            return self.principals[principal_id]
        except KeyError:
            raise UnknownPrincipal(principal_id) from None

    def __contains__(self, principal_id: str) -> bool:
        return principal_id in self.principals

    @classmethod
    def load(cls, path: str | Path) -> "PrincipalStore":
        data = json.loads(Path(path).read_text())
        return cls({p["principal_id"]: Principal.from_dict(p) for p in data["principals"]})

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {"principals": [p.to_dict() for _, p in sorted(self.principals.items())]}, indent=2))


def _touches_ingest(topic_filter: str) -> bool:
    return topic_filter.split("/", 1)[0] in ("ingest", "+", "#")


def check_grant(principal: Principal, grant: Grant) -> None:
    """Raise :class:`GrantExceedsRole` if ``grant`` lies outside the principal's roles."""
    allowed = set().union(*(ROLE_ACTIONS[r] for r in principal.roles))
    if grant.action not in allowed:
        raise GrantExceedsRole(
            f"{principal.principal_id} ({', '.join(sorted(r.value for r in principal.roles))})"
            f" may not hold {grant.action.value} grants")
    if grant.action in (Action.PUBLISH, Action.INGEST):
        if grant.topic_filter is None:
            raise GrantExceedsRole(f"{grant.action.value} grants must be topic scoped")
        own = f"ingest/{principal.org_id}/#"
        if _touches_ingest(grant.topic_filter) and not filter_covers(own, grant.topic_filter):
            raise GrantExceedsRole(f"{grant.action.value} grant {grant.topic_filter!r} "
                                   f"reaches beyond {own!r}")
        if not filter_covers(own, grant.topic_filter) and not principal.has(Role.OPERATOR):
            raise GrantExceedsRole(f"only operators may publish outside {own!r}")
    if grant.topic_filter is not None and not principal.has(Role.OPERATOR):
        if grant.action is Action.SUBSCRIBE and not (
            filter_covers("data/#", grant.topic_filter)
            or filter_covers(f"alarms/{principal.org_id}/#", grant.topic_filter)
        ):
            raise GrantExceedsRole(f"subscribe scope {grant.topic_filter!r} needs operator role")


def issue_token(store: PrincipalStore, principal_id: str, grants: Iterable[Grant], ttl_s: float,
                now: int, secret: bytes, token_id: str | None = None) -> Token:
    """Issue a signed token; ``now`` and the token times are epoch milliseconds."""
    principal = store.get(principal_id)
    grants = tuple(grants)
    for grant in grants:
        check_grant(principal, grant)
    expires_at = now + int(round(ttl_s * 1000))
    if expires_at <= now:
        raise ValueError("ttl_s must be positive (expires_at > issued_at)")
    unsigned = Token(token_id or uuid.uuid4().hex, principal_id, grants, now, expires_at)
    return Token(unsigned.token_id, principal_id, grants, now, expires_at,
                 _mac(secret, unsigned.body()))


def verify(token: Token | str, now: int, secret: bytes, store: PrincipalStore | None = None,
           skew_ms: int = 0) -> Principal:
    return verify_identity(token, now, secret, store, skew_ms).principal


def verify_identity(token: Token | str, now: int, secret: bytes,
                    store: PrincipalStore | None = None, skew_ms: int = 0) -> Identity:
    if isinstance(token, str):
        token = Token.decode(token)
    if not hmac.compare_digest(_mac(secret, token.body()), token.signature):
        raise BadSignature(f"token {token.token_id} signature mismatch")
    if now >= token.expires_at + skew_ms:
        raise Expired(f"token {token.token_id} expired at {token.expires_at}")
    if store is None:
        raise UnknownPrincipal("no principal store to resolve the token against")
    return Identity(store.get(token.principal_id), token.grants)


def _category_of_topic(topic: str) -> DataCategory | None:
    levels = topic.split("/")
    if len(levels) >= 2 and levels[0] == "data":
        try:
            return DataCategory(levels[1])
        except ValueError:
            return None
    return None


def _covers(grant: Grant, resource: str | DataCategory) -> bool:
    if isinstance(resource, DataCategory):
        if grant.categories is not None:
            return resource in grant.categories
        return filter_covers(grant.topic_filter, f"data/{resource.value}/#")
    if grant.topic_filter is not None:
        return filter_covers(grant.topic_filter, resource)
    category = _category_of_topic(resource)
    return category is not None and category in grant.categories


def authorize(identity: Identity | None, action: Action | str,
              resource: str | DataCategory) -> Decision:
    """Allow iff some grant with a matching action covers ``resource``; default deny.

    ``resource`` is a topic name, a subscription filter (covered only if the
    grant covers every topic it can match) or a :class:`DataCategory`.
    """
    if identity is None:
        return Decision(False, "unauthenticated")
    action = Action(action)
    for grant in identity.grants:
        if grant.action is action and _covers(grant, resource):
            return ALLOW
    label = resource.value if isinstance(resource, DataCategory) else resource
    return Decision(False, f"no {action.value} grant covers {label!r}")


class IdentityProvider:
    """Binds a principal store and server secret to a clock."""

    def __init__(self, store: PrincipalStore, secret: bytes, clock: Callable[[], int],
                 skew_ms: int = 0):
        self.store = store
        self.secret = secret
        self.clock = clock
        self.skew_ms = skew_ms

    @classmethod
    def from_env(cls, store: PrincipalStore, clock: Callable[[], int],
                 skew_ms: int = 30_000) -> "IdentityProvider":
        secret = os.environ.get(SECRET_ENV)
        if not secret:
            raise AccessError(f"set {SECRET_ENV} to the server secret")
        return cls(store, secret.encode(), clock, skew_ms)

    def issue(self, principal_id: str, grants: Iterable[Grant], ttl_s: float) -> Token:
        return issue_token(self.store, principal_id, grants, ttl_s, self.clock(), self.secret)

    def authenticate(self, token: Token | str) -> Identity:
        return verify_identity(token, self.clock(), self.secret, self.store, self.skew_ms)

    def try_authenticate(self, token: Token | str | None) -> Identity | None:
        if token is None:
            return None
        try:
            return self.authenticate(token)
        except (InvalidToken, UnknownPrincipal):
            return None

    # broker hooks -----------------------------------------------------------

    def broker_authenticate(self, username: str | None, password: str | None) -> Identity | None:
        return self.try_authenticate(password)

    @staticmethod
    def broker_authorize(identity: Any, action: str, topic: str) -> bool:
        return bool(authorize(identity, action, topic))
