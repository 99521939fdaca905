import json
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkit import ALICE, BOB, CHUNK, FakeClock, make_catalog, make_fed
from stashfed import wire
from stashfed.model import Principal, TokenTable
from stashfed.origin import (
    GiB, KiB, MiB, Admission, MemoryModel, Origin, Registrar, TransferLedger, process_model,
    thread_model,
)
from stashfed.redirector import Redirector
from stashfed.store import ChunkStore
from stashfed.transport import LocalTransport

P = Principal(ALICE)


def test_memory_models():
    assert process_model() == MemoryModel(128 * MiB, 64 * GiB, "crash")
    assert thread_model() == MemoryModel(64 * KiB, 64 * GiB, "refuse")
    assert process_model().max_connections == 512


def test_eleventh_transfer_refused():
    ledger = TransferLedger(10)
    tickets = [ledger.admit(P) for _ in range(10)]
    assert all(v is Admission.ADMITTED for v, _ in tickets)
    assert ledger.admit(P)[0] is Admission.OVER_LIMIT
    # other principals are unaffected
    assert ledger.admit(Principal(BOB))[0] is Admission.ADMITTED
    ledger.release(tickets[0][1])
    assert ledger.admit(P)[0] is Admission.ADMITTED


def test_process_model_ledger_arithmetic():
    ledger = TransferLedger(None, process_model())
    for _ in range(450):
        assert ledger.admit(Principal(f"/CN=u{_}"))[0] is Admission.ADMITTED
    assert ledger.memory_in_use == 450 * 128 * MiB
    assert ledger.memory_in_use / GiB == pytest.approx(56.25)
    # 451..512 still fit under 64 GiB
    for i in range(450, 512):
        assert ledger.admit(Principal(f"/CN=u{i}"))[0] is Admission.ADMITTED
    assert ledger.memory_in_use == 64 * GiB
    # the 513th would need 64.125 GiB: the process model falls over
    verdict, ticket = ledger.admit(Principal("/CN=last"))
    assert verdict is Admission.CRASHED and ticket is None
    assert ledger.crash_events == 1 and ledger.total == 0
    assert ledger.admit(P)[0] is Admission.CRASHED
    ledger.restart()
    assert ledger.admit(P)[0] is Admission.ADMITTED


def test_thread_model_refuses_instead_of_crashing():
    ledger = TransferLedger(None, MemoryModel(64 * KiB, 640 * KiB, "refuse"))
    for i in range(10):
        assert ledger.admit(Principal(f"/CN={i}"))[0] is Admission.ADMITTED
    assert ledger.admit(P)[0] is Admission.OUT_OF_MEMORY
    assert ledger.crash_events == 0 and ledger.total == 10


def test_release_after_crash_is_ignored():
    ledger = TransferLedger(None, MemoryModel(1, 1, "crash"))
    _, t = ledger.admit(P)
    assert ledger.admit(P)[0] is Admission.CRASHED
    ledger.release(t)  # stale generation, must not underflow
    assert ledger.total == 0


def test_concurrent_admission_storm():
    ledger = TransferLedger(10)
    barrier = threading.Barrier(40)
    outcomes = []
    lock = threading.Lock()

    def worker(i):
        barrier.wait()
        for _ in range(200):
            v, t = ledger.admit(P)
            with lock:
                outcomes.append(v)
            if t:
                ledger.release(t)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(40)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ledger.peak_per_principal[P] <= 10
    assert ledger.total == 0
    assert Admission.ADMITTED in outcomes


# -- request handling --------------------------------------------------------------

def _origin(tmp_path, tree, limit=10, publish=True):
    catalog = make_catalog(tree)
    store = ChunkStore(tmp_path / "o")
    for p, content in tree.items():
        for c in catalog.entry(p).chunks:
            store.write(c.sha256, content[c.offset:c.end])
    o = Origin("o1", "o1:1", (40.8, -96.7), store, catalog if publish else None,
               TokenTable({"t-alice": ALICE, "t-bob": BOB}), TransferLedger(limit))
    return o, catalog


def _get(o, target, token=None, rng=None):
    headers = {}
    if token:
        headers[wire.TOKEN_HEADER] = token
    if rng:
        headers["Range"] = rng
    return LocalTransport({"o": o.handle}).request("o", wire.Request("GET", target, headers))


def test_catalog_is_public(tmp_path):
    o, catalog = _origin(tmp_path, {"/f": b"x" * 10})
    anon = _get(o, "/catalog")
    authed = _get(o, "/catalog", "t-alice")
    assert anon.status == 200 and anon.body == authed.body == catalog.to_bytes()


def test_catalog_before_publish_is_404(tmp_path):
    o, _ = _origin(tmp_path, {"/f": b"x"}, publish=False)
    assert _get(o, "/catalog").status == 404


def test_data_status_codes(tmp_path):
    o, _ = _origin(tmp_path, {"/f": b"0123456789"})
    assert _get(o, "/data/f").status == 401
    assert _get(o, "/data/f", "bogus").status == 401
    assert _get(o, "/data/nope", "t-alice").status == 404
    denied = _get(o, "/data/f", "t-bob", "bytes=0-0")
    assert denied.status == 403 and b"0" not in denied.body
    assert _get(o, "/data/f", "t-alice", "bytes=20-30").status == 400
    full = _get(o, "/data/f", "t-alice")
    assert full.status == 200 and full.body == b"0123456789"
    part = _get(o, "/data/f", "t-alice", "bytes=2-4")
    assert part.status == 206 and part.body == b"234"
    assert part.headers["Content-Range"] == "bytes 2-4/10"
    assert o.ledger.total == 0


def test_eleventh_request_gets_429(tmp_path):
    o, _ = _origin(tmp_path, {"/f": b"x" * 100})
    held = [o.serve_data("/f", None, "t-alice") for _ in range(10)]
    assert all(r.status == 200 for r in held)
    assert o.serve_data("/f", None, "t-alice").status == 429
    for r in held:
        r.close()  # never started, must still free the slot
    assert o.ledger.total == 0
    assert o.serve_data("/f", None, "t-alice").status == 200


def test_memory_exhaustion_is_503(tmp_path):
    o, _ = _origin(tmp_path, {"/f": b"x" * 100}, limit=None)
    o.ledger = TransferLedger(None, MemoryModel(128 * MiB, 256 * MiB, "refuse"))
    a = o.serve_data("/f", None, "t-alice")
    b = o.serve_data("/f", None, "t-bob")  # bob is denied before the ledger
    c = o.serve_data("/f", None, "t-alice")
    assert (a.status, b.status, c.status) == (200, 403, 200)
    assert o.serve_data("/f", None, "t-alice").status == 503


def test_crash_aborts_inflight_stream(tmp_path):
    o, _ = _origin(tmp_path, {"/f": b"x" * 10_000}, limit=None)
    o.piece_size = 100
    o.ledger = TransferLedger(None, MemoryModel(1, 1, "crash"))
    resp = o.serve_data("/f", None, "t-alice")
    it = resp.iter_body()
    next(it)
    assert o.serve_data("/f", None, "t-alice").status == 503
    with pytest.raises(ConnectionAbortedError):
        list(it)


@settings(max_examples=60)
@given(st.data())
def test_ranges_are_byte_exact(tmp_path_factory, data):
    rng = random.Random(data.draw(st.integers(0, 10 ** 6)))
    content = rng.randbytes(data.draw(st.integers(1, 5 * CHUNK)))
    o, _ = _origin(tmp_path_factory.mktemp("o"), {"/f": content})
    o.piece_size = 97
    a = data.draw(st.integers(0, len(content) - 1))
    b = data.draw(st.integers(a, len(content) - 1))
    resp = _get(o, "/data/f", "t-alice", f"bytes={a}-{b}")
    assert resp.status == 206 and resp.body == content[a:b + 1]


def test_stat_is_public(tmp_path):
    o, catalog = _origin(tmp_path, {"/d/f": b"x" * 3000})
    resp = _get(o, "/stat/d/f")
    assert resp.status == 200
    assert json.loads(resp.body)["size"] == 3000
    assert _get(o, "/stat/none").status == 404


# -- registration ------------------------------------------------------------------

def test_subscribe_then_locate(tmp_path):
    fed = make_fed(tmp_path, {"/f": b"abc"}, with_cache=False)
    assert [n.node_id for n in fed.redirector.locate("/f")] == ["origin-0"]


def test_redirector_down_at_startup(tmp_path):
    o, _ = _origin(tmp_path, {"/f": b"abc"})
    clock = FakeClock()
    transport = LocalTransport({"o1:1": o.handle})
    red = Redirector(transport, clock=clock)
    transport.register("red:1", red.handle)
    transport.down.add("red:1")
    reg = Registrar(o, "red:1", transport, interval=10, backoff_base=1, clock=clock)
    assert not reg.tick()
    # the origin keeps serving while unregistered
    assert _get(o, "/data/f", "t-alice").body == b"abc"
    assert reg.next_due == clock() + 1
    clock.advance(1)
    assert not reg.tick()
    assert reg.next_due == clock() + 2
    transport.down.discard("red:1")
    clock.advance(2)
    assert reg.tick()
    assert [n.node_id for n in red.locate("/f")] == ["o1"]
    assert not reg.tick()  # not due yet
    clock.advance(10)
    assert reg.tick()


def test_revision_bump_resubscribes(tmp_path):
    o, catalog = _origin(tmp_path, {"/f": b"abc"})
    clock = FakeClock()
    transport = LocalTransport({"o1:1": o.handle})
    red = Redirector(transport, clock=clock)
    transport.register("red:1", red.handle)
    reg = Registrar(o, "red:1", transport, clock=clock)
    assert reg.tick()
    new = make_catalog({"/f": b"abc", "/g": b"new"}, prev=catalog.revision)
    o.store.write(new.entry("/g").chunks[0].sha256, b"new")
    o.publish(new)
    assert reg.tick()  # due immediately
    assert reg.registered_revision == 2
    assert red.status()["subscriptions"][0]["revision"] == 2
    assert [n.node_id for n in red.locate("/g")] == ["o1"]
