"""Synthetic site generation and the instrumented origin server."""

import gzip
import http.client
import json

import pytest

from websift import synthweb
from websift.features import LONG_STRING_LEN, extract_features
from websift.labels import ENGINE_NAMES, GROUND_TRUTH_THRESHOLD, SignatureSet
from websift.synthweb import (
    SIGNATURE_MARKER,
    SIGNATURE_NAME,
    PageSpec,
    SiteSpecError,
    SynthWebServer,
    engine_fixture_for,
    generate_site,
    load_site_file,
    load_site_spec,
    render_page,
    signature_line,
)


# --- page rendering ---

def test_render_page_is_deterministic():
    page = PageSpec("/b001", kind="benign", links=["/b002"])
    assert render_page(page, seed=3) == render_page(page, seed=3)
    assert render_page(page, seed=3) != render_page(page, seed=4)


def test_render_page_explicit_body_wins():
    page = PageSpec("/custom", body="<html><body>fixed</body></html>")
    assert render_page(page, seed=1) == b"<html><body>fixed</body></html>"
    assert render_page(page, seed=2) == b"<html><body>fixed</body></html>"


def test_benign_page_lists_links_and_form():
    page = PageSpec("/b000", links=["/b001", "/m000"], login_form=True)
    body = render_page(page, seed=1).decode("utf-8")
    assert 'href="/b001"' in body
    assert 'href="/m000"' in body
    assert 'type="password"' in body
    assert 'action="/login"' in body


def test_malicious_page_carries_every_labeling_hook():
    page = PageSpec("/m000", kind="malicious")
    body = render_page(page, seed=1)
    assert SIGNATURE_MARKER in body
    vec = extract_features(body, "text/html").as_dict()
    assert vec["ishtmlwithjs"] == 1
    assert vec["Numeval"] >= 1
    assert vec["NumLongStrings"] >= 1
    assert vec["iframe"] >= 1
    assert vec["onload"] >= 1
    assert vec["MaxStrLen"] >= LONG_STRING_LEN


def test_malicious_page_varies_with_seed_but_keeps_marker():
    page = PageSpec("/m001", kind="malicious")
    a = render_page(page, seed=1)
    b = render_page(page, seed=2)
    assert a != b
    assert SIGNATURE_MARKER in a and SIGNATURE_MARKER in b


def test_signature_line_matches_rendered_malicious_page():
    sigdb = SignatureSet.from_text(signature_line())
    assert len(sigdb) == 1
    body = render_page(PageSpec("/m002", kind="malicious"), seed=9)
    assert sigdb.scan(body) == [SIGNATURE_NAME]
    assert sigdb.scan(render_page(PageSpec("/b002"), seed=9)) == []


# --- site generation ---

def test_generate_site_shape_and_determinism():
    doc = generate_site(6, 3, seed=11)
    assert doc == generate_site(6, 3, seed=11)
    assert doc != generate_site(6, 3, seed=12)
    pages = load_site_spec(doc)
    assert len(pages) == 9
    kinds = {p.kind for p in pages.values()}
    assert kinds == {"benign", "malicious"}
    assert sum(p.kind == "malicious" for p in pages.values()) == 3


def test_generate_site_links_stay_on_site():
    doc = generate_site(5, 2, seed=7)
    pages = load_site_spec(doc)
    for page in pages.values():
        for href in page.links:
            assert href in pages
            assert href != page.path


def test_generate_site_marks_a_login_page():
    pages = load_site_spec(generate_site(4, 1, seed=5))
    assert sum(p.login_form for p in pages.values()) == 1


# --- spec validation ---

@pytest.mark.parametrize("doc", [
    [],
    {"pages": "nope"},
    {"pages": [{"kind": "benign"}]},
    {"pages": [{"path": "relative"}]},
    {"pages": [{"path": "/a"}, {"path": "/a"}]},
    {"pages": [{"path": "/a", "kind": "parked"}]},
    {"pages": [{"path": "/a", "links": [1, 2]}]},
])
def test_load_site_spec_rejects_malformed(doc):
    with pytest.raises(SiteSpecError):
        load_site_spec(doc)


def test_load_site_file_round_trip(tmp_path):
    doc = generate_site(2, 1, seed=3)
    path = tmp_path / "site.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    assert load_site_file(path) == doc


def test_load_site_file_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(SiteSpecError):
        load_site_file(path)


# --- engine fixture ---

def test_engine_fixture_covers_malicious_pages_only():
    doc = generate_site(3, 2, seed=21)
    fixture = engine_fixture_for(doc)
    pages = load_site_spec(doc)
    digests = {synthweb.sha256(render_page(p, doc["seed"])).hexdigest()
               for p in pages.values() if p.kind == "malicious"}
    assert set(fixture) == digests
    for names in fixture.values():
        assert len(names) == 12
        assert len(set(names)) == 12
        assert set(names) <= set(ENGINE_NAMES)
        assert len(names) >= GROUND_TRUTH_THRESHOLD


def test_engine_fixture_detection_count_configurable():
    doc = generate_site(1, 1, seed=2)
    fixture = engine_fixture_for(doc, detections=3)
    assert all(len(v) == 3 for v in fixture.values())


# --- instrumented server ---

@pytest.fixture
def site_server():
    doc = {
        "seed": 4,
        "pages": [
            {"path": "/plain", "kind": "benign"},
            {"path": "/mal", "kind": "malicious"},
            {"path": "/zipped", "kind": "benign", "gzip": True},
            {"path": "/fixed", "body": "<html><body>pinned</body></html>"},
        ],
    }
    server = SynthWebServer(doc).start()
    try:
        yield server
    finally:
        server.stop()


def fetch(server, path, method="GET", body=None, headers=None):
    host, port = server.address
    conn = http.client.HTTPConnection(host, port, timeout=10)
    try:
        conn.request(method, path, body=body, headers=headers or {})
        resp = conn.getresponse()
        return resp.status, dict(resp.getheaders()), resp.read()
    finally:
        conn.close()


def test_server_serves_rendered_pages(site_server):
    status, _, body = fetch(site_server, "/plain")
    assert status == 200
    assert body == render_page(site_server.pages["/plain"], site_server.seed)
    status, _, body = fetch(site_server, "/fixed")
    assert body == b"<html><body>pinned</body></html>"


def test_server_unknown_path_is_404(site_server):
    status, _, body = fetch(site_server, "/missing")
    assert status == 404
    assert b"not found" in body


def test_server_gzip_pages_decode_to_rendered_bytes(site_server):
    status, headers, body = fetch(site_server, "/zipped")
    assert status == 200
    assert headers["Content-Encoding"] == "gzip"
    assert gzip.decompress(body) == render_page(site_server.pages["/zipped"],
                                                site_server.seed)
    # mtime pinned to zero keeps the compressed bytes reproducible
    _, _, again = fetch(site_server, "/zipped")
    assert again == body


def test_server_post_returns_welcome_and_ledgers_form(site_server):
    status, _, body = fetch(site_server, "/login", method="POST",
                            body="user=testuser&pass=testpass",
                            headers={"Content-Type": "application/x-www-form-urlencoded"})
    assert status == 200
    assert b"welcome" in body
    entry = site_server.ledger()[-1]
    assert entry["method"] == "POST"
    assert entry["form"] == {"user": "testuser", "pass": "testpass"}


def test_server_ledger_captures_proxy_metadata(site_server):
    fetch(site_server, "/plain", headers={"Via": "1.1 websift",
                                          "X-Websift-Agent": "agent-3"})
    entry = site_server.ledger()[-1]
    assert entry["via"] == "1.1 websift"
    assert entry["agent"] == "agent-3"
    assert entry["path"] == "/plain"


def test_server_request_count_tracks_every_hit(site_server):
    before = site_server.request_count()
    fetch(site_server, "/plain")
    fetch(site_server, "/missing")
    assert site_server.request_count() == before + 2
