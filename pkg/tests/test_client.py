import math
import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkit import (
    CHUNK, LINCOLN, SAN_DIEGO, SYRACUSE, corrupting, make_catalog, make_fed, status_only,
)
from stashfed import wire
from stashfed.cache import DiskCache
from stashfed.client import (
    EXIT_ALL_FAILED, EXIT_AUTH, EXIT_NOT_FOUND, Client, FetchError, Source, order_sources,
    parse_sources, source_list,
)
from stashfed.geo import haversine_km
from stashfed.model import NodeInfo, VariantSymlink


def chord_km(a, b, r=6371.0088):
    """Great-circle distance from the 3-D chord length (independent of haversine)."""
    def xyz(p):
        lat, lon = map(math.radians, p)
        return (math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat))
    c = math.dist(xyz(a), xyz(b))
    return 2 * r * math.asin(min(1.0, c / 2))


def test_haversine_matches_chord_oracle():
    assert haversine_km(LINCOLN, SYRACUSE) == pytest.approx(chord_km(LINCOLN, SYRACUSE), rel=1e-9)
    assert haversine_km(LINCOLN, LINCOLN) == 0.0
    assert 1650 < haversine_km(LINCOLN, SYRACUSE) < 1750
    assert 1950 < haversine_km(LINCOLN, SAN_DIEGO) < 2050


def test_lincoln_prefers_syracuse():
    cands = [NodeInfo("sd", "cache", "sd:1", SAN_DIEGO), NodeInfo("syr", "cache", "syr:1", SYRACUSE)]
    assert [s.node_id for s in order_sources(LINCOLN, cands)] == ["syr", "sd"]
    assert [s.node_id for s in order_sources(LINCOLN, cands[:1])] == ["sd"]


def test_ties_break_on_node_id():
    cands = [NodeInfo(n, "cache", f"{n}:1", SYRACUSE) for n in ("b", "c", "a")]
    assert [s.node_id for s in order_sources(LINCOLN, cands)] == ["a", "b", "c"]


def test_caches_precede_origins():
    cands = [NodeInfo("o", "origin", "o:1", LINCOLN), NodeInfo("c", "cache", "c:1", SAN_DIEGO)]
    assert [s.kind for s in order_sources(LINCOLN, cands)] == ["cache", "origin"]


geo = st.tuples(st.floats(-90, 90), st.floats(-180, 180))


@given(geo, st.lists(st.tuples(st.sampled_from("abcdefgh"), geo,
                               st.sampled_from(["cache", "origin"])),
                     min_size=1, max_size=8, unique_by=lambda t: t[0]),
       st.randoms())
def test_ordering_is_a_stable_permutation(client, nodes, rnd):
    cands = [NodeInfo(n, role, f"{n}:1", g) for n, g, role in nodes]
    out = order_sources(client, cands)
    assert sorted(s.node_id for s in out) == sorted(n.node_id for n in cands)
    shuffled = list(cands)
    rnd.shuffle(shuffled)
    assert order_sources(client, shuffled) == out


def test_source_list_puts_local_first():
    srcs = [Source("cache", "c:1"), Source("local_fs", "/mnt"), Source("origin", "o:1")]
    assert [s.kind for s in source_list(srcs)] == ["local_fs", "cache", "origin"]
    with pytest.raises(ValueError):
        source_list([])


def test_parse_sources():
    got = parse_sources("c1:8000, origin=o1:1094,/mnt/frames,local=/x")
    assert got == [Source("cache", "c1:8000"), Source("origin", "o1:1094"),
                   Source("local_fs", "/mnt/frames"), Source("local_fs", "/x")]
    with pytest.raises(ValueError):
        parse_sources("bogus=1:2")


# -- fetch ----------------------------------------------------------------------------

@pytest.fixture
def fed(tmp_path):
    rng = random.Random(7)
    return make_fed(tmp_path, {"/frames/a.gwf": rng.randbytes(3 * CHUNK + 100),
                               "/frames/b.gwf": rng.randbytes(10)})


def _client(fed, **kw):
    sleeps = []
    c = Client(fed.transport, token=kw.pop("token", "t-alice"), geo=SYRACUSE,
               sleep=sleeps.append, **kw)
    c.sleeps = sleeps
    return c


def test_corrupt_first_source_falls_back(fed, tmp_path):
    fed.transport.register("evil:1", corrupting(fed.origin.handle, offset=CHUNK + 5))
    srcs = [Source("origin", "evil:1"), Source("origin", fed.origin.info.endpoint)]
    dest = tmp_path / "out"
    report = _client(fed).fetch("/frames/a.gwf", dest, sources=srcs)
    assert dest.read_bytes() == fed.tree["/frames/a.gwf"]
    assert report.fallbacks == 1
    assert report.failures[0].reason == "verification"
    assert report.source == f"origin:{fed.origin.info.endpoint}"


def test_local_fs_short_circuits_network(fed, tmp_path):
    site = tmp_path / "site"
    (site / "frames").mkdir(parents=True)
    (site / "frames" / "a.gwf").write_bytes(fed.tree["/frames/a.gwf"])
    n = fed.transport.total_connections()
    report = _client(fed).fetch("/frames/a.gwf", tmp_path / "out", catalog=fed.catalog,
                                sources=[Source("cache", "cache:8000"),
                                         Source("local_fs", str(site))])
    assert fed.transport.total_connections() == n
    assert report.connections == 0 and report.source == f"local_fs:{site}"


def test_429_retries_then_falls_back(fed, tmp_path):
    fed.transport.register("busy:1", status_only(429))
    srcs = [Source("origin", "busy:1"), Source("cache", "cache:8000")]
    c = _client(fed)
    report = c.fetch("/frames/a.gwf", tmp_path / "out", sources=srcs)
    assert c.sleeps == [0.5, 1.0, 2.0]
    assert report.retries == 3 and report.fallbacks == 1
    # one refused catalog probe, then the first try and three retries
    assert fed.transport.connections["busy:1"] == 1 + 4
    assert report.failures[0].reason == "overloaded"


def test_mid_stream_disconnect_keeps_verified_chunks(fed, tmp_path):
    real = fed.origin.handle
    content = fed.tree["/frames/a.gwf"]

    def cut(req):
        resp = real(req)
        if req.path.startswith("/data"):
            def pieces():
                yield b"".join(resp.iter_body())[:2 * CHUNK + 3]
                raise ConnectionResetError("peer went away")
            return wire.Response(resp.status, resp.headers.copy(), stream=pieces(),
                                 length=resp.length)
        return resp

    fed.transport.register("flaky:1", cut)
    srcs = [Source("origin", "flaky:1"), Source("cache", "cache:8000")]
    report = _client(fed).fetch("/frames/a.gwf", tmp_path / "out", sources=srcs)
    assert (tmp_path / "out").read_bytes() == content
    assert report.failures[0].reason == "short_read"
    # only chunks 2 and 3 were needed from the cache
    assert fed.cache.misses == 2


def test_all_sources_fail(fed, tmp_path):
    fed.transport.register("busy:1", status_only(503))
    srcs = [Source("origin", "busy:1"), Source("cache", "nowhere:1")]
    with pytest.raises(FetchError) as err:
        _client(fed).fetch("/frames/a.gwf", tmp_path / "out", sources=srcs,
                           catalog=fed.catalog)
    assert err.value.exit_code == EXIT_ALL_FAILED
    assert [f.reason for f in err.value.failures] == ["overloaded", "connection"]
    assert not (tmp_path / "out").exists()


def test_auth_failure_exit_code(fed, tmp_path):
    with pytest.raises(FetchError) as err:
        _client(fed, token="t-bob").fetch("/frames/a.gwf", tmp_path / "out",
                                          sources=[Source("cache", "cache:8000")])
    assert err.value.exit_code == EXIT_AUTH


def test_unknown_path_exit_code(fed, tmp_path):
    with pytest.raises(FetchError) as err:
        _client(fed).fetch("/frames/zzz", tmp_path / "out", sources=[Source("cache", "cache:8000")])
    assert err.value.exit_code == EXIT_NOT_FOUND


@pytest.mark.parametrize("path", ["/frames/a.gwf", "/frames/b.gwf"])
def test_mode_equivalence(fed, tmp_path, path):
    size = len(fed.tree[path])
    out = {}
    for mode in ("direct", "chunked"):
        before = fed.origin.fetches
        dest = tmp_path / mode
        report = _client(fed).fetch(path, dest, mode=mode,
                                    sources=[Source("origin", fed.origin.info.endpoint)])
        out[mode] = dest.read_bytes()
        opened = fed.origin.fetches - before
        assert opened == report.connections
        assert opened == (math.ceil(size / CHUNK) if mode == "chunked" else 1)
    assert out["direct"] == out["chunked"] == fed.tree[path]


def test_default_mode_depends_on_source_kind(fed, tmp_path):
    r1 = _client(fed).fetch("/frames/a.gwf", tmp_path / "1", sources=[Source("cache", "cache:8000")])
    r2 = _client(fed).fetch("/frames/a.gwf", tmp_path / "2",
                            sources=[Source("origin", fed.origin.info.endpoint)])
    assert (r1.mode, r2.mode) == ("chunked", "direct")


def test_redirector_located_sources(fed, tmp_path):
    c = _client(fed, redirector="redirector:9000")
    report = c.fetch("/frames/b.gwf", tmp_path / "out")
    assert report.source == "origin:origin-0:1094"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.sampled_from(["direct", "chunked", None]))
def test_fallback_equivalence(tmp_path_factory, k, mode):
    tmp = tmp_path_factory.mktemp("fb")
    fed = make_fed(tmp, {"/f": os.urandom(2 * CHUNK + 9)})
    fed.transport.register("bad-conn:1", status_only(503))
    fed.transport.register("bad-data:1", corrupting(fed.origin.handle))
    bad = [Source("origin", "nowhere:1"), Source("origin", "bad-data:1"),
           Source("cache", "bad-conn:1")][:k]
    good = [Source("cache", "cache:8000"), Source("origin", fed.origin.info.endpoint)]
    a = _client(fed).fetch("/f", tmp / "a", mode=mode, sources=bad + good, catalog=fed.catalog)
    b = _client(fed).fetch("/f", tmp / "b", mode=mode, sources=good, catalog=fed.catalog)
    assert (tmp / "a").read_bytes() == (tmp / "b").read_bytes() == fed.tree["/f"]
    assert a.fallbacks == k and b.fallbacks == 0


def test_local_worker_cache(fed, tmp_path):
    lc = DiskCache(tmp_path / "wn", 10 * CHUNK)
    c = _client(fed, local_cache=lc)
    c.fetch("/frames/a.gwf", tmp_path / "1", sources=[Source("cache", "cache:8000")],
            catalog=fed.catalog)
    n = fed.transport.total_connections()
    report = c.fetch("/frames/a.gwf", tmp_path / "2", sources=[Source("cache", "cache:8000")],
                     catalog=fed.catalog)
    assert fed.transport.total_connections() == n
    assert report.local_cache_hits == 4 and report.connections == 0


# -- stat and variants ----------------------------------------------------------------

def test_stat(fed):
    c = _client(fed)
    src = [Source("cache", "cache:8000")]
    assert c.stat("/frames/b.gwf", src).size == 10
    with pytest.raises(FetchError) as err:
        c.stat("/frames/none", src)
    assert err.value.exit_code == EXIT_NOT_FOUND


def test_variant_symlink_resolution(tmp_path):
    tree = {"/data/frames/f1.gwf": b"frame-one" * 50}
    links = [VariantSymlink("/ligo/frames", "frames_variant", "/data/frames")]
    fed = make_fed(tmp_path, tree, symlinks=links)
    src = [Source("cache", "cache:8000")]
    c = _client(fed)
    assert c.stat("/ligo/frames/f1.gwf", src) == fed.catalog.entry("/data/frames/f1.gwf")

    # site config points the variant at a local mount: read straight from it
    mount = tmp_path / "mnt" / "ligo_nfs" / "frames"
    mount.mkdir(parents=True)
    (mount / "f1.gwf").write_bytes(tree["/data/frames/f1.gwf"])
    site = _client(fed, site_config={"frames_variant": str(mount)})
    n = fed.origin_data_connections()
    report = site.fetch("/ligo/frames/f1.gwf", tmp_path / "out", sources=src)
    assert report.source == f"local_fs:{mount}/f1.gwf"
    assert fed.origin_data_connections() == n and fed.cache.misses == 0

    # without a site entry the default target is fetched over the network
    plain = _client(fed).fetch("/ligo/frames/f1.gwf", tmp_path / "out2", sources=src)
    assert plain.resolved_path == "/data/frames/f1.gwf"
    assert (tmp_path / "out2").read_bytes() == tree["/data/frames/f1.gwf"]


def test_pinned_revision(fed, tmp_path):
    c = _client(fed)
    report = c.fetch("/frames/b.gwf", tmp_path / "out", sources=[Source("cache", "cache:8000")],
                     catalog=fed.catalog)
    assert report.revision == 1
    new = make_catalog(fed.tree, prev=1)
    fed.origin.publish(new)
    fed.cache.refresh_acls()
    again = c.fetch("/frames/b.gwf", tmp_path / "out", sources=[Source("cache", "cache:8000")])
    assert again.revision == 2
