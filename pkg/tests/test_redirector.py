import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkit import FakeClock, make_catalog
from stashfed import wire
from stashfed.model import NodeInfo
from stashfed.redirector import Redirector, locate_remote, origins_remote
from stashfed.transport import LocalTransport


def _setup(catalogs: dict):
    """catalogs: node_id -> Catalog served at <node_id>:1094."""
    transport = LocalTransport()
    for nid, cat in catalogs.items():
        body = cat.to_bytes()
        transport.register(f"{nid}:1094", lambda req, body=body: wire.json_response(200, body))
    clock = FakeClock()
    red = Redirector(transport, ttl_seconds=30, clock=clock)
    transport.register("red:1", red.handle)
    return red, clock, transport


def _info(nid, geo=(0.0, 0.0)):
    return NodeInfo(nid, "origin", f"{nid}:1094", geo)


def test_subscribe_idempotent_and_refreshes_ttl():
    red, clock, _ = _setup({"unl": make_catalog({"/f": b"1"})})
    red.subscribe(_info("unl"), 1)
    assert len(red.entries) == 1
    first = red.entries["unl"].expires_at
    clock.advance(20)
    red.subscribe(_info("unl"), 1)
    assert len(red.entries) == 1
    assert red.entries["unl"].expires_at == first + 20


def test_locate_orders_by_node_id_and_filters_membership():
    cats = {"zz-origin": make_catalog({"/a": b"1", "/both": b"2"}),
            "aa-origin": make_catalog({"/b": b"1", "/both": b"2"})}
    red, _, _ = _setup(cats)
    for nid in cats:
        red.subscribe(_info(nid), 1)
    assert [n.node_id for n in red.locate("/both")] == ["aa-origin", "zz-origin"]
    assert [n.node_id for n in red.locate("/a")] == ["zz-origin"]
    assert red.locate("/unknown") == []


def test_expired_origin_excluded():
    red, clock, _ = _setup({"a": make_catalog({"/f": b"1"}), "b": make_catalog({"/f": b"1"})})
    red.subscribe(_info("a"), 1)
    clock.advance(15)
    red.subscribe(_info("b"), 1)
    clock.advance(15)  # a expires exactly now
    assert [n.node_id for n in red.locate("/f")] == ["b"]
    assert red.sweep() == 1 and list(red.entries) == ["b"]


def test_catalog_refetched_only_on_revision_change():
    red, _, transport = _setup({"a": make_catalog({"/f": b"1"})})
    red.subscribe(_info("a"), 1)
    red.subscribe(_info("a"), 1)
    assert transport.connections["a:1094"] == 1
    red.subscribe(_info("a"), 2)
    assert transport.connections["a:1094"] == 2


def test_only_origins_subscribe():
    red, _, _ = _setup({})
    with pytest.raises(ValueError):
        red.subscribe(NodeInfo("c", "cache", "c:1", (0, 0)), 1)


def test_http_endpoints():
    red, _, transport = _setup({"a": make_catalog({"/d/f": b"1"})})
    body = json.dumps(dict(_info("a").to_json(), revision=1)).encode()
    resp = transport.request("red:1", wire.Request("POST", "/subscribe", body=body))
    assert resp.status == 200
    bad = transport.request("red:1", wire.Request("POST", "/subscribe", body=b"{}"))
    assert bad.status == 400
    assert [n.node_id for n in locate_remote(transport, "red:1", "/d/f")] == ["a"]
    assert locate_remote(transport, "red:1", "/zzz") == []
    assert [n.node_id for n in origins_remote(transport, "red:1")] == ["a"]
    missing = transport.request("red:1", wire.Request("GET", "/locate"))
    assert missing.status == 400


@settings(max_examples=100)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.floats(0, 40)), max_size=20),
       st.floats(0, 80))
def test_locate_never_returns_expired(ops, probe):
    cats = {n: make_catalog({"/f": b"1"}) for n in "abcd"}
    red, clock, _ = _setup(cats)
    last = {}
    for nid, dt in ops:
        clock.advance(dt)
        red.subscribe(_info(nid), 1)
        last[nid] = clock()
    clock.advance(probe)
    got = [n.node_id for n in red.locate("/f")]
    assert got == sorted(n for n, t in last.items() if t + 30 > clock())


@given(st.integers(1, 6))
def test_n_subscribes_equal_one(n):
    red, clock, _ = _setup({"a": make_catalog({"/f": b"1"})})
    for _ in range(n):
        red.subscribe(_info("a"), 1)
    assert len(red.entries) == 1
    assert red.entries["a"].expires_at == clock() + 30
