import pytest
from hypothesis import given, strategies as st

from seaflow.access import (
    AccessError,
    Action,
    BadSignature,
    Expired,
    Grant,
    GrantExceedsRole,
    IdentityProvider,
    InvalidToken,
    Principal,
    PrincipalStore,
    Role,
    Token,
    UnknownPrincipal,
    authorize,
    check_grant,
)
from seaflow.model import DataCategory

SECRET = b"test-secret-not-for-production"
NOW = 1_700_000_000_000


def _store():
    store = PrincipalStore()
    store.add(Principal("prod7", "org7", frozenset({Role.PRODUCER})))
    store.add(Principal("cons", "org9", frozenset({Role.CONSUMER})))
    store.add(Principal("ops", "org7", frozenset({Role.OPERATOR})))
    return store


@pytest.fixture
def idp():
    clock = {"now": NOW}
    provider = IdentityProvider(_store(), SECRET, lambda: clock["now"])
    provider.clock_state = clock
    return provider


def test_token_roundtrip_and_authorize(idp):
    token = idp.issue("cons", [Grant.for_categories("subscribe", ["open_access"])], 60).encode()
    ident = idp.authenticate(token)
    assert ident.principal.principal_id == "cons"
    assert authorize(ident, "subscribe", "data/open_access/org7/p/t")
    assert authorize(ident, "subscribe", "data/open_access/#")
    assert not authorize(ident, "subscribe", "data/#")
    assert not authorize(ident, "subscribe", "data/legally_restricted/x")
    assert not authorize(ident, "query_pull", DataCategory.OPEN_ACCESS)
    assert not authorize(None, "subscribe", "data/open_access/x")


def test_category_grant_equals_topic_grant(idp):
    by_cat = idp.authenticate(idp.issue("cons", [Grant.for_categories("subscribe", ["open_access"])], 60))
    by_topic = idp.authenticate(idp.issue("cons", [Grant.topics("subscribe", "data/open_access/#")], 60))
    for resource in ["data/open_access/a/b", "data/+/x", "data/open_access/#",
                     DataCategory.OPEN_ACCESS, DataCategory.BUSINESS_CRITICAL]:
        assert bool(authorize(by_cat, "subscribe", resource)) == bool(
            authorize(by_topic, "subscribe", resource))


def test_tampered_token_is_rejected(idp):
    token = idp.issue("cons", [Grant.topics("subscribe", "data/open_access/#")], 60)
    forged = Token(token.token_id, token.principal_id,
                   (Grant.topics("subscribe", "data/#"),), token.issued_at, token.expires_at,
                   token.signature)
    with pytest.raises(BadSignature):
        idp.authenticate(forged.encode())
    with pytest.raises(InvalidToken):
        idp.authenticate("not-a-token")


def test_token_expiry(idp):
    token = idp.issue("cons", [Grant.topics("subscribe", "data/open_access/#")], 1)
    idp.clock_state["now"] += 1000
    with pytest.raises(Expired):
        idp.authenticate(token)
    assert idp.try_authenticate(token) is None


def test_unknown_principal(idp):
    with pytest.raises(UnknownPrincipal):
        idp.issue("ghost", [], 60)


@pytest.mark.parametrize("pid, grant", [
    ("cons", Grant.topics("publish", "ingest/org9/#")),
    ("prod7", Grant.topics("publish", "ingest/org8/#")),
    ("prod7", Grant.topics("publish", "ingest/#")),
    ("prod7", Grant.topics("publish", "data/open_access/#")),
    ("prod7", Grant.topics("subscribe", "data/#")),
    ("cons", Grant.topics("subscribe", "ingest/#")),
    ("ops", Grant.topics("publish", "ingest/#")),
    ("ops", Grant.for_categories("publish", ["open_access"])),
])
def test_grants_beyond_role_are_refused(pid, grant):
    with pytest.raises(GrantExceedsRole):
        check_grant(_store().get(pid), grant)


@pytest.mark.parametrize("pid, grant", [
    ("prod7", Grant.topics("publish", "ingest/org7/#")),
    ("prod7", Grant.topics("ingest", "ingest/org7/buoy/+")),
    ("cons", Grant.topics("subscribe", "data/open_access/#")),
    ("cons", Grant.topics("subscribe", "alarms/org9/#")),
    ("ops", Grant.topics("publish", "data/#")),
    ("ops", Grant.topics("subscribe", "ingest/#")),
])
def test_grants_within_role_are_accepted(pid, grant):
    check_grant(_store().get(pid), grant)


def test_grant_needs_exactly_one_scope():
    with pytest.raises(ValueError):
        Grant(Action.SUBSCRIBE)
    with pytest.raises(ValueError):
        Grant(Action.SUBSCRIBE, "data/#", frozenset({DataCategory.OPEN_ACCESS}))


def test_principal_store_roundtrip(tmp_path):
    path = tmp_path / "principals.json"
    _store().dump(path)
    loaded = PrincipalStore.load(path)
    assert loaded.principals == _store().principals
    assert "ops" in loaded


def test_secret_comes_from_environment(monkeypatch):
    monkeypatch.delenv("SEAFLOW_SECRET", raising=False)
    with pytest.raises(AccessError):
        IdentityProvider.from_env(_store(), lambda: NOW)
    monkeypatch.setenv("SEAFLOW_SECRET", "abc")
    assert IdentityProvider.from_env(_store(), lambda: NOW).secret == b"abc"


def test_broker_hooks(idp):
    token = idp.issue("prod7", [Grant.topics("publish", "ingest/org7/#")], 60).encode()
    ident = idp.broker_authenticate("prod7", token)
    assert ident is not None
    assert idp.broker_authenticate("prod7", "garbage") is None
    assert IdentityProvider.broker_authorize(ident, "publish", "ingest/org7/p")
    assert not IdentityProvider.broker_authorize(ident, "publish", "ingest/org8/p")


@given(st.sampled_from(list(DataCategory)), st.sets(st.sampled_from(list(DataCategory))))
def test_category_decision_matches_topic_decision(cat, granted):
    from seaflow.access import Identity

    ident = Identity(_store().get("cons"),
                     (Grant.for_categories("subscribe", granted),) if granted else ())
    assert bool(authorize(ident, "subscribe", cat)) == bool(
        authorize(ident, "subscribe", f"data/{cat.value}/#")) == (cat in granted)
