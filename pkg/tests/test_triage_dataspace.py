from dataclasses import replace

import pytest

from seaflow.access import Grant, Identity, Principal, Role
from seaflow.broker.core import NotAuthorized
from seaflow.dataspace import AppendResult, DataSpace, RawArchive, Selector, haversine_m
from seaflow.model import AttributeFlag as G, DataCategory as C, Location, QCReport, append_lineage
from seaflow.triage import TriagePolicy, classify, route, triage

from support import EPOCH_MS, make_obs

POLICY = TriagePolicy.from_dict({
    "default": "open_access",
    "rules": [{"match": {"org_id": "org8"}, "category": "legally_restricted"},
              {"match": {"parameter": "bathymetry"}, "category": "business_critical"}],
})


def test_first_matching_rule_wins():
    assert classify(make_obs(), POLICY) is C.OPEN_ACCESS
    assert classify(make_obs(org="org8", parameter="bathymetry"), POLICY) is C.LEGALLY_RESTRICTED
    assert classify(make_obs(parameter="bathymetry"), POLICY) is C.BUSINESS_CRITICAL


def test_triage_routes_to_one_topic():
    obs, topic = triage(make_obs(platform="b1"), POLICY, EPOCH_MS)
    assert topic == "data/open_access/org7/b1/temperature"
    assert obs.lineage[-1].stage == "triage"
    bad = replace(obs, qc=QCReport.of(G.BAD, G.GOOD, G.GOOD, G.GOOD))
    assert route(bad, POLICY) == "quarantine/org7/temperature"


def test_policy_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TriagePolicy.from_dict({"rules": []})
    with pytest.raises(ValueError):
        TriagePolicy.from_dict({"default": "open_access",
                                "rules": [{"match": {"sensor": "x"}, "category": "open_access"}]})
    assert TriagePolicy.from_dict(POLICY.to_dict()) == POLICY


def ident(roles, *grants):
    return Identity(Principal("p", "org9", frozenset(roles)), tuple(grants))


PUBLIC = ident({Role.CONSUMER}, Grant.for_categories("query_pull", ["open_access"]))
OPS = ident({Role.OPERATOR}, Grant.for_categories("query_pull", list(C)))


def _store(tmp_path=None):
    store = DataSpace(tmp_path / "journal.jsonl" if tmp_path else None)
    for i, (cat, org) in enumerate([(C.OPEN_ACCESS, "org7"), (C.LEGALLY_RESTRICTED, "org8"),
                                    (C.BUSINESS_CRITICAL, "org7")]):
        store.append(make_obs(float(i), EPOCH_MS + i * 1000, sensor=f"s{i}", org=org,
                              category=cat))
    store.append(make_obs(99.0, EPOCH_MS, sensor="q", category=C.OPEN_ACCESS), quarantined=True)
    return store


def test_query_filters_by_grant_and_selector():
    store = _store()
    assert [o.sensor_id for o in store.query(Selector(), PUBLIC)] == ["s0"]
    assert [o.sensor_id for o in store.query(Selector(org_id="org7"), OPS)] == ["s0", "s2"]
    assert store.query(Selector(), None) == []
    with pytest.raises(NotAuthorized):
        store.query(Selector(categories={C.LEGALLY_RESTRICTED}), PUBLIC)
    window = Selector(time_from=EPOCH_MS + 1000, time_to=EPOCH_MS + 2000)
    assert [o.sensor_id for o in store.query(window, OPS)] == ["s1"]


def test_quarantined_rows_only_for_operators():
    store = _store()
    assert "q" not in [o.sensor_id for o in store.query(Selector(include_quarantined=True), PUBLIC)]
    assert "q" in [o.sensor_id for o in store.query(Selector(include_quarantined=True), OPS)]
    assert "q" not in [o.sensor_id for o in store.query(Selector(), OPS)]


def test_append_prefers_longer_lineage():
    store = DataSpace()
    missing = replace(make_obs(None, qc=QCReport.of(G.NOT_EVALUATED, G.MISSING, G.NOT_EVALUATED,
                                                    G.NOT_EVALUATED)))
    missing = append_lineage(missing, "qc", EPOCH_MS)
    real = append_lineage(append_lineage(make_obs(1.0), "transform", EPOCH_MS), "qc", EPOCH_MS)
    assert store.append(missing) is AppendResult.STORED
    assert store.append(real) is AppendResult.REPLACED
    assert store.append(missing) is AppendResult.IGNORED
    assert store.count(missing=False) == 1


def test_journal_replays(tmp_path):
    store = _store(tmp_path)
    again = DataSpace(tmp_path / "journal.jsonl")
    assert [r.obs for r in again.rows()] == [r.obs for r in store.rows()]
    assert again.count() == 4


def test_latest_near_location():
    store = DataSpace()
    store.append(make_obs(1.0, EPOCH_MS, sensor="a", location=Location(60.0, 10.0)))
    store.append(make_obs(2.0, EPOCH_MS + 1, sensor="a", location=Location(60.0, 10.0)))
    store.append(make_obs(3.0, EPOCH_MS, sensor="far", location=Location(61.0, 10.0)))
    hits = store.latest("temperature", Location(60.001, 10.0), 1000.0)
    assert [(o.sensor_id, o.value) for o in hits] == [("a", 2.0)]
    with pytest.raises(ValueError):
        store.latest("temperature", Location(0, 0), 0)


def test_haversine_one_degree_latitude():
    assert haversine_m(Location(0, 0), Location(1, 0)) == pytest.approx(111_195, rel=1e-3)


def test_selector_rejects_empty_window():
    with pytest.raises(ValueError):
        Selector(time_from=5, time_to=5)


def test_raw_archive_writes_lines(tmp_path):
    archive = RawArchive(tmp_path / "raw.jsonl")
    archive.write("org7", "json_v1", 1, b"{}")
    archive.write("org7", "json_v1", 2, b"{}")
    assert archive.count == 2
    assert len((tmp_path / "raw.jsonl").read_text().splitlines()) == 2
