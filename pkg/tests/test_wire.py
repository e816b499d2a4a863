"""ICAP framing, gateway dispatch, and the forward proxy on live sockets."""

import contextlib
import socket
import socketserver
import threading

import pytest
from hypothesis import given, strategies as st

from websift import wire
from websift.wire import (
    ChunkedBodyError,
    EncapsulatedOffsetsError,
    HeaderSyntaxError,
    HttpExchange,
    HttpRequest,
    HttpResponse,
    IcapGateway,
    IcapResponse,
    MissingEncapsulatedError,
    ProxyServer,
    RequestLineError,
    TruncatedMessageError,
    WARNING_PAGE,
    build_reqmod,
    encapsulate,
    exchange_from_respmod,
    icap_transact,
    parse_icap,
    parse_icap_response,
    serve_icap,
)

CRLF = b"\r\n"


def head_block(lines) -> bytes:
    return CRLF.join(lines) + CRLF + CRLF


def make_exchange(url="http://site.test/page", status=200, body=b"<html>x</html>",
                  seeder="benign", agent="agent-0"):
    return HttpExchange(
        request=HttpRequest("GET", url, [("Host", "site.test"), ("Accept", "*/*")]),
        response=HttpResponse(status, "OK", [("Content-Type", "text/html")]),
        body=body,
        started_at=1_500_000_000_000,
        agent_id=agent,
        seeder_tag=seeder,
    )


class _Verdict:
    def __init__(self, malware: bool):
        self.is_malware = malware


# --- parse_icap: well-formed messages ---

def test_parse_options_without_payload():
    raw = b"OPTIONS icap://g/respmod ICAP/1.0\r\nHost: g\r\n\r\n"
    msg = parse_icap(raw)
    assert msg.method == "OPTIONS"
    assert msg.uri == "icap://g/respmod"
    assert msg.version == "ICAP/1.0"
    assert msg.headers == [("Host", "g")]
    assert msg.encapsulated == []
    assert msg.sections == {}
    assert msg.body_token() is None


# Hand-built RESPMOD whose header blocks are sized so the declared offsets
# land exactly at 0, 137, and 296; the len() assertions double as the
# byte-count audit of the fixture itself.
FIXTURE_REQ_HDR = head_block([
    b"GET http://fixture.test/samples/page.html HTTP/1.1",
    b"Host: fixture.test",
    b"User-Agent: probe/1.0",
    b"Accept: */*",
    b"Accept-Encoding: identity",
])
FIXTURE_RES_HDR = head_block([
    b"HTTP/1.1 200 OK",
    b"Content-Type: text/html; charset=utf-8",
    b"Content-Length: 25",
    b"Server: synthweb",
    b"Cache-Control: no-store",
    b"Date: Tue, 01 Aug 2017 00:00:00 GMT",
])
FIXTURE_BODY = b"fixture body of 25 bytes!"


def build_fixture_respmod() -> bytes:
    assert len(FIXTURE_REQ_HDR) == 137
    assert len(FIXTURE_RES_HDR) == 159
    assert len(FIXTURE_REQ_HDR) + len(FIXTURE_RES_HDR) == 296
    assert len(FIXTURE_BODY) == 25
    head = head_block([
        b"RESPMOD icap://gw.test/respmod ICAP/1.0",
        b"Host: gw.test",
        b"Encapsulated: req-hdr=0, res-hdr=137, res-body=296",
    ])
    chunked = b"19\r\n" + FIXTURE_BODY + b"\r\n0\r\n\r\n"
    return head + FIXTURE_REQ_HDR + FIXTURE_RES_HDR + chunked


def test_parse_respmod_fixture_exact_offsets():
    msg = parse_icap(build_fixture_respmod())
    assert msg.method == "RESPMOD"
    assert msg.encapsulated == [("req-hdr", 0), ("res-hdr", 137), ("res-body", 296)]
    assert msg.sections["req-hdr"] == FIXTURE_REQ_HDR
    assert msg.sections["res-hdr"] == FIXTURE_RES_HDR
    assert msg.sections["res-body"] == FIXTURE_BODY
    assert msg.body_token() == "res-body"


def test_parse_respmod_fixture_rebuilds_exchange():
    exchange, exchange_id, markers = exchange_from_respmod(parse_icap(build_fixture_respmod()))
    assert exchange.request.method == "GET"
    assert exchange.request.url == "http://fixture.test/samples/page.html"
    assert exchange.request.header("User-Agent") == "probe/1.0"
    assert exchange.response.status == 200
    assert exchange.response.header("Server") == "synthweb"
    assert exchange.body == FIXTURE_BODY
    assert exchange_id == ""
    assert markers == {}


def test_parse_respmod_null_body():
    req_hdr = head_block([b"GET http://a.test/ HTTP/1.1", b"Host: a.test"])
    res_hdr = head_block([b"HTTP/1.1 204 No Content"])
    enc = b"Encapsulated: req-hdr=0, res-hdr=%d, null-body=%d" % (
        len(req_hdr), len(req_hdr) + len(res_hdr))
    raw = head_block([b"RESPMOD icap://g/respmod ICAP/1.0", enc]) + req_hdr + res_hdr
    msg = parse_icap(raw)
    assert msg.body_token() == "null-body"
    assert "null-body" not in msg.sections
    assert msg.sections["res-hdr"] == res_hdr


def test_parse_chunk_extensions_and_trailers_are_dropped():
    req_hdr = head_block([b"GET http://a.test/ HTTP/1.1"])
    body = b"5;ext=1\r\nhello\r\n0\r\nTrailer: x\r\n\r\n"
    raw = head_block([
        b"REQMOD icap://g/reqmod ICAP/1.0",
        b"Encapsulated: req-hdr=0, req-body=%d" % len(req_hdr),
    ]) + req_hdr + body
    msg = parse_icap(raw)
    assert msg.sections["req-body"] == b"hello"


# --- parse_icap: error classes carry byte positions ---

def test_empty_input_is_truncated_at_zero():
    with pytest.raises(TruncatedMessageError) as exc:
        parse_icap(b"")
    assert exc.value.position == 0


def test_unterminated_head_is_truncated_at_end():
    raw = b"OPTIONS icap://g/x ICAP/1.0\r\nHost: g\r\n"
    with pytest.raises(TruncatedMessageError) as exc:
        parse_icap(raw)
    assert exc.value.position == len(raw)


@pytest.mark.parametrize("line", [
    b"BROKEN LINE",
    b"OPTIONS icap://g/x HTTP/1.1",
    b" icap://g/x ICAP/1.0",
    b"OPTIONS icap://g/x ICAP/1.0 extra",
])
def test_malformed_request_line_positions_at_zero(line):
    with pytest.raises(RequestLineError) as exc:
        parse_icap(line + b"\r\nHost: g\r\n\r\n")
    assert exc.value.position == 0


def test_header_without_colon_positions_at_line_start():
    raw = b"OPTIONS icap://g/x ICAP/1.0\r\nHost: g\r\nBADHEADER\r\n\r\n"
    with pytest.raises(HeaderSyntaxError) as exc:
        parse_icap(raw)
    assert exc.value.position == raw.find(b"BADHEADER")


@pytest.mark.parametrize("method", [b"REQMOD", b"RESPMOD"])
def test_mod_methods_require_encapsulated(method):
    raw = method + b" icap://g/x ICAP/1.0\r\nHost: g\r\n\r\n"
    with pytest.raises(MissingEncapsulatedError) as exc:
        parse_icap(raw)
    assert exc.value.position == len(raw)


def test_options_with_stray_payload_requires_encapsulated():
    raw = b"OPTIONS icap://g/x ICAP/1.0\r\nHost: g\r\n\r\nstray"
    with pytest.raises(MissingEncapsulatedError) as exc:
        parse_icap(raw)
    assert exc.value.position == raw.find(b"stray")


@pytest.mark.parametrize("enc", [
    b"res-hdr=5, null-body=10",       # first offset not 0
    b"req-hdr=0, res-hdr=40, res-body=20",  # not increasing
    b"req-hdr=0, res-body=10, null-body=20",  # two body tokens
    b"res-body=0, req-hdr=10",        # body token not last
    b"req-hdr=0, res-bdy=10",         # unknown token
    b"req-hdr=zero, null-body=10",    # non-numeric offset
    b"",                              # empty value
])
def test_bad_encapsulated_positions_at_header_line(enc):
    raw = head_block([
        b"RESPMOD icap://g/respmod ICAP/1.0",
        b"Host: g",
        b"Encapsulated: " + enc,
    ]) + b"x" * 64
    with pytest.raises(EncapsulatedOffsetsError) as exc:
        parse_icap(raw)
    assert exc.value.position == raw.find(b"Encapsulated:")


def test_null_body_offset_must_match_payload_length():
    raw = head_block([
        b"RESPMOD icap://g/respmod ICAP/1.0",
        b"Encapsulated: req-hdr=0, null-body=2",
    ]) + b"abcd"
    with pytest.raises(EncapsulatedOffsetsError) as exc:
        parse_icap(raw)
    assert exc.value.position == len(raw)


def test_payload_shorter_than_sections_is_truncated():
    raw = head_block([
        b"RESPMOD icap://g/respmod ICAP/1.0",
        b"Encapsulated: req-hdr=0, res-hdr=50, null-body=60",
    ]) + b"tiny"
    with pytest.raises(TruncatedMessageError) as exc:
        parse_icap(raw)
    assert exc.value.position == len(raw)


def test_bad_chunk_size_positions_inside_payload():
    req_hdr = head_block([b"GET http://a.test/ HTTP/1.1"])
    raw = head_block([
        b"REQMOD icap://g/reqmod ICAP/1.0",
        b"Encapsulated: req-hdr=0, req-body=%d" % len(req_hdr),
    ]) + req_hdr + b"zz\r\nhello\r\n0\r\n\r\n"
    with pytest.raises(ChunkedBodyError) as exc:
        parse_icap(raw)
    assert exc.value.position == raw.find(b"zz\r\n")


@pytest.mark.parametrize("tail", [
    b"5\r\nhel",                  # chunk data cut short
    b"5\r\nhello\r\n",            # missing terminating chunk
    b"5\r\nhelloXX0\r\n\r\n",     # bad data terminator
    b"5",                         # size line never completed
])
def test_truncated_chunked_bodies_raise(tail):
    req_hdr = head_block([b"GET http://a.test/ HTTP/1.1"])
    raw = head_block([
        b"REQMOD icap://g/reqmod ICAP/1.0",
        b"Encapsulated: req-hdr=0, req-body=%d" % len(req_hdr),
    ]) + req_hdr + tail
    with pytest.raises(ChunkedBodyError) as exc:
        parse_icap(raw)
    assert exc.value.position >= raw.find(tail)


def test_trailing_bytes_after_final_chunk_rejected():
    req_hdr = head_block([b"GET http://a.test/ HTTP/1.1"])
    raw = head_block([
        b"REQMOD icap://g/reqmod ICAP/1.0",
        b"Encapsulated: req-hdr=0, req-body=%d" % len(req_hdr),
    ]) + req_hdr + b"5\r\nhello\r\n0\r\n\r\nextra"
    with pytest.raises(ChunkedBodyError) as exc:
        parse_icap(raw)
    assert exc.value.position == raw.find(b"extra")


# --- ICAP responses ---

def test_parse_icap_response_with_sections():
    res_hdr = head_block([b"HTTP/1.1 200 OK", b"Content-Length: 2"])
    raw = head_block([
        b"ICAP/1.0 200 OK",
        b'ISTag: "t"',
        b"Encapsulated: res-hdr=0, res-body=%d" % len(res_hdr),
    ]) + res_hdr + b"2\r\nhi\r\n0\r\n\r\n"
    resp = parse_icap_response(raw)
    assert resp.status == 200
    assert resp.reason == "OK"
    assert resp.header("ISTag") == '"t"'
    assert resp.section("res-hdr") == res_hdr
    assert resp.section("res-body") == b"hi"


def test_parse_icap_response_no_modifications():
    raw = b'ICAP/1.0 204 No modifications\r\nISTag: "t"\r\nEncapsulated: null-body=0\r\n\r\n'
    resp = parse_icap_response(raw)
    assert resp.status == 204
    assert resp.sections == []


def test_parse_icap_response_rejects_bad_status_line():
    with pytest.raises(RequestLineError) as exc:
        parse_icap_response(b"HTTP/1.1 200 OK\r\n\r\n")
    assert exc.value.position == 0


def test_icap_response_to_bytes_appends_null_body():
    resp = IcapResponse(204, "No modifications", [("ISTag", '"x"')])
    raw = resp.to_bytes()
    assert b"Encapsulated: null-body=0\r\n" in raw
    assert raw.endswith(b"\r\n\r\n")
    again = parse_icap_response(raw)
    assert again.status == 204
    assert again.header("ISTag") == '"x"'


def test_icap_response_to_bytes_offsets_and_chunking():
    res_hdr = head_block([b"HTTP/1.1 200 OK"])
    resp = IcapResponse(200, "OK", [("ISTag", '"x"')],
                        [("res-hdr", res_hdr), ("res-body", b"payload")])
    raw = resp.to_bytes()
    assert b"Encapsulated: res-hdr=0, res-body=%d" % len(res_hdr) in raw
    again = parse_icap_response(raw)
    assert again.section("res-hdr") == res_hdr
    assert again.section("res-body") == b"payload"


def test_chunk_encode_empty_is_bare_terminator():
    assert wire._chunk_encode(b"") == b"0\r\n\r\n"
    assert wire._chunk_encode(b"abc") == b"3\r\nabc\r\n0\r\n\r\n"


# --- encapsulate / exchange_from_respmod round trip ---

def test_encapsulate_declares_exact_offsets():
    exchange = make_exchange()
    raw = encapsulate(exchange, exchange_id="e1")
    req_hdr = wire._serialize_request_head(exchange.request)
    res_hdr = wire._serialize_response_head(exchange.response)
    expect = b"Encapsulated: req-hdr=0, res-hdr=%d, res-body=%d" % (
        len(req_hdr), len(req_hdr) + len(res_hdr))
    assert expect in raw
    msg = parse_icap(raw)
    assert msg.sections["req-hdr"] == req_hdr
    assert msg.sections["res-hdr"] == res_hdr
    assert msg.sections["res-body"] == exchange.body


def test_encapsulate_empty_body_uses_null_body():
    exchange = make_exchange(body=b"")
    raw = encapsulate(exchange)
    assert b"null-body=" in raw
    msg = parse_icap(raw)
    assert msg.body_token() == "null-body"
    rebuilt, _, _ = exchange_from_respmod(msg)
    assert rebuilt.body == b""


def test_encapsulate_metadata_headers_round_trip():
    exchange = make_exchange(seeder="malware", agent="agent-9")
    raw = encapsulate(exchange, exchange_id="xid-7",
                      markers={"b.key": "2", "a.key": "1"})
    # markers are emitted sorted by key
    assert raw.find(b"X-Exchange-Marker: a.key=1") < raw.find(b"X-Exchange-Marker: b.key=2")
    rebuilt, exchange_id, markers = exchange_from_respmod(parse_icap(raw))
    assert exchange_id == "xid-7"
    assert markers == {"a.key": "1", "b.key": "2"}
    assert rebuilt.started_at == exchange.started_at
    assert rebuilt.agent_id == "agent-9"
    assert rebuilt.seeder_tag == "malware"


def test_exchange_round_trip_is_exact():
    exchange = make_exchange(url="http://h.test/a?q=1", status=404, body=b"\x00\xffbin")
    rebuilt, _, _ = exchange_from_respmod(parse_icap(encapsulate(exchange)))
    assert rebuilt == exchange


def test_exchange_from_respmod_requires_both_header_sections():
    msg = parse_icap(build_fixture_respmod())
    del msg.sections["req-hdr"]
    with pytest.raises(ValueError):
        exchange_from_respmod(msg)


def test_encapsulate_validates_exchange():
    exchange = make_exchange(url="not-a-url")
    with pytest.raises(ValueError):
        encapsulate(exchange)


_token = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_",
    min_size=1, max_size=12)
_value = st.text(
    alphabet=st.characters(min_codepoint=0x21, max_codepoint=0x7E),
    max_size=16).map(str.strip)
_headers = st.lists(st.tuples(_token, _value), max_size=5)


@st.composite
def exchanges(draw):
    host = draw(_token)
    path = draw(st.text(alphabet="abcdefghij0123456789/._-?&=", max_size=20))
    return HttpExchange(
        request=HttpRequest(draw(st.sampled_from(["GET", "POST", "HEAD"])),
                            f"http://{host}/{path}", draw(_headers)),
        response=HttpResponse(draw(st.integers(100, 599)),
                              draw(_token), draw(_headers)),
        body=draw(st.binary(max_size=200)),
        started_at=draw(st.integers(0, 2 ** 50)),
        agent_id=draw(_token),
        seeder_tag=draw(st.sampled_from(wire.SEEDER_TAGS)),
    )


@given(exchange=exchanges(),
       exchange_id=_token,
       markers=st.dictionaries(_token, _token, max_size=3))
def test_encapsulate_parse_round_trip_property(exchange, exchange_id, markers):
    raw = encapsulate(exchange, exchange_id=exchange_id, markers=markers)
    rebuilt, got_id, got_markers = exchange_from_respmod(parse_icap(raw))
    assert rebuilt == exchange
    assert got_id == exchange_id
    assert got_markers == markers


# --- REQMOD building ---

def test_build_reqmod_with_body():
    request = HttpRequest("POST", "http://a.test/submit", [("Host", "a.test")])
    raw = build_reqmod(request, b"user=1", exchange_id="e2")
    msg = parse_icap(raw)
    assert msg.method == "REQMOD"
    assert msg.header("X-Exchange-Id") == "e2"
    assert msg.sections["req-body"] == b"user=1"
    assert msg.body_token() == "req-body"


def test_build_reqmod_without_body():
    raw = build_reqmod(HttpRequest("GET", "http://a.test/", []))
    msg = parse_icap(raw)
    assert msg.body_token() == "null-body"
    assert "req-body" not in msg.sections


# --- exchange model ---

def test_exchange_validate_rejects_bad_fields():
    with pytest.raises(ValueError):
        make_exchange(url="/relative/only").validate()
    with pytest.raises(ValueError):
        make_exchange(seeder="parked").validate()
    bad = make_exchange()
    bad.started_at = -5
    with pytest.raises(ValueError):
        bad.validate()


def test_exchange_doc_round_trip_drops_body():
    exchange = make_exchange(body=b"big payload")
    doc = exchange.to_doc()
    assert "body" not in doc
    again = HttpExchange.from_doc(doc)
    assert again.body == b""
    assert again.request == exchange.request
    assert again.response == exchange.response
    assert again.started_at == exchange.started_at
    assert again.seeder_tag == exchange.seeder_tag


# --- serve_icap dispatch ---

def test_serve_options_advertises_methods():
    msg = parse_icap(b"OPTIONS icap://g/respmod ICAP/1.0\r\nHost: g\r\n\r\n")
    resp = serve_icap(msg, "collect", istag='"tag-1"')
    assert resp.status == 200
    assert resp.header("Methods") == "RESPMOD, REQMOD"
    assert resp.header("Preview") == "0"
    assert resp.header("ISTag") == '"tag-1"'


def test_serve_reqmod_stashes_body_by_exchange_id():
    stash: dict[str, bytes] = {}
    msg = parse_icap(build_reqmod(HttpRequest("POST", "http://a.test/f", []),
                                  b"field=1", exchange_id="x9"))
    resp = serve_icap(msg, "collect", reqmod_bodies=stash)
    assert resp.status == 204
    assert stash == {"x9": b"field=1"}


def test_serve_reqmod_without_body_stashes_nothing():
    stash: dict[str, bytes] = {}
    msg = parse_icap(build_reqmod(HttpRequest("GET", "http://a.test/", []),
                                  exchange_id="x9"))
    assert serve_icap(msg, "collect", reqmod_bodies=stash).status == 204
    assert stash == {}


def test_serve_respmod_collect_emits_once():
    emitted = []
    exchange = make_exchange()
    msg = parse_icap(encapsulate(exchange, exchange_id="e3"))
    resp = serve_icap(msg, "collect", emit=emitted.append)
    assert resp.status == 204
    assert resp.sections == []
    assert len(emitted) == 1
    assert emitted[0].exchange == exchange
    assert emitted[0].verdict is None


def test_serve_respmod_attaches_stashed_request_body():
    emitted = []
    stash = {"e4": b"posted-bytes"}
    msg = parse_icap(encapsulate(make_exchange(), exchange_id="e4"))
    serve_icap(msg, "collect", emit=emitted.append, reqmod_bodies=stash)
    assert emitted[0].request_body == b"posted-bytes"
    assert stash == {}


def test_serve_respmod_collect_never_rewrites():
    emitted = []
    msg = parse_icap(encapsulate(make_exchange(), exchange_id="e5"))
    resp = serve_icap(msg, "collect", verdict_fn=lambda ex: _Verdict(True),
                      emit=emitted.append)
    assert resp.status == 204
    assert emitted[0].verdict.is_malware


def test_serve_respmod_enforce_rewrites_malicious():
    emitted = []
    exchange = make_exchange(body=b"<script>evil()</script>")
    msg = parse_icap(encapsulate(exchange, exchange_id="e6"))
    resp = serve_icap(msg, "enforce", verdict_fn=lambda ex: _Verdict(True),
                      emit=emitted.append)
    assert resp.status == 200
    assert resp.section("res-body") == WARNING_PAGE
    res_hdr = resp.section("res-hdr")
    assert b"X-Websift-Blocked: malware" in res_hdr
    assert b"Content-Type: text/html; charset=utf-8" in res_hdr
    assert b"Content-Length: %d" % len(WARNING_PAGE) in res_hdr
    # the exchange reaching the pipeline still carries the original body
    assert emitted[0].exchange.body == b"<script>evil()</script>"


def test_serve_respmod_enforce_passes_benign():
    msg = parse_icap(encapsulate(make_exchange(), exchange_id="e7"))
    resp = serve_icap(msg, "enforce", verdict_fn=lambda ex: _Verdict(False))
    assert resp.status == 204


def test_serve_respmod_pipeline_refusal_returns_500():
    def bad_emit(emitted):
        raise RuntimeError("store offline")

    msg = parse_icap(encapsulate(make_exchange(), exchange_id="e8"))
    resp = serve_icap(msg, "collect", emit=bad_emit)
    assert resp.status == 500
    assert "refused" in resp.reason.lower()


def test_serve_respmod_verdict_failure_returns_500():
    def bad_verdict(exchange):
        raise KeyError("blacklist unavailable")

    msg = parse_icap(encapsulate(make_exchange(), exchange_id="e9"))
    assert serve_icap(msg, "collect", verdict_fn=bad_verdict).status == 500


def test_serve_respmod_bad_http_sections_returns_500():
    msg = parse_icap(build_fixture_respmod())
    del msg.sections["req-hdr"]
    assert serve_icap(msg, "collect").status == 500


def test_serve_unknown_method_returns_405():
    msg = parse_icap(b"PURGE icap://g/x ICAP/1.0\r\nHost: g\r\n\r\n")
    assert serve_icap(msg, "collect").status == 405


def test_serve_rejects_unknown_mode():
    msg = parse_icap(b"OPTIONS icap://g/x ICAP/1.0\r\nHost: g\r\n\r\n")
    with pytest.raises(ValueError):
        serve_icap(msg, "observe")


# --- gateway over TCP ---

@contextlib.contextmanager
def running_gateway(**kw):
    gw = IcapGateway(host="127.0.0.1", port=0, **kw)
    gw.start()
    try:
        yield gw
    finally:
        gw.stop()


def test_gateway_options_over_socket():
    with running_gateway() as gw:
        raw = b"OPTIONS icap://127.0.0.1/respmod ICAP/1.0\r\nHost: h\r\n\r\n"
        resp = icap_transact(gw.address, raw)
    assert resp.status == 200
    assert resp.header("Methods") == "RESPMOD, REQMOD"
    assert resp.header("ISTag") == gw.istag


def test_gateway_respmod_collect_over_socket():
    emitted = []
    with running_gateway(emit=emitted.append) as gw:
        exchange = make_exchange()
        resp = icap_transact(gw.address, encapsulate(exchange, exchange_id="s1"))
    assert resp.status == 204
    assert len(emitted) == 1
    assert emitted[0].exchange == exchange


def test_gateway_rejects_garbage_with_400():
    with running_gateway() as gw:
        resp = icap_transact(gw.address, b"NOT AN ICAP LINE\r\n\r\n")
    assert resp.status == 400


def test_gateway_keeps_refused_exchanges_reachable():
    def bad_emit(emitted):
        raise RuntimeError("pipeline down")

    with running_gateway(emit=bad_emit) as gw:
        resp = icap_transact(gw.address, encapsulate(make_exchange(), exchange_id="s2"))
        refused = list(gw.refused)
    assert resp.status == 500
    assert len(refused) == 1
    assert refused[0].markers["wire.emit_refused"] == "true"


def test_gateway_enforce_over_socket():
    with running_gateway(mode="enforce", verdict_fn=lambda ex: _Verdict(True)) as gw:
        resp = icap_transact(gw.address, encapsulate(make_exchange(), exchange_id="s3"))
    assert resp.status == 200
    assert resp.section("res-body") == WARNING_PAGE


def test_gateway_rejects_unknown_mode():
    with pytest.raises(ValueError):
        IcapGateway(mode="observe")


# --- origin fixture for proxy tests ---

class _OriginServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _OriginHandler(socketserver.StreamRequestHandler):
    def handle(self):
        line = self.rfile.readline()
        if not line:
            return
        method, path, _ = line.decode("latin-1").split(" ", 2)
        received = {}
        while True:
            raw = self.rfile.readline()
            if raw in (b"\r\n", b"\n", b""):
                break
            name, _, value = raw.decode("latin-1").strip().partition(":")
            received[name.strip().lower()] = value.strip()
        body = b""
        if "content-length" in received:
            body = self.rfile.read(int(received["content-length"]))
        self.server.seen.append((method, path, received, body))
        if path == "/chunked":
            self.wfile.write(b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n"
                             b"6\r\nchunk1\r\n7\r\n chunk2\r\n0\r\n\r\n")
            return
        if path == "/echoheaders":
            payload = "\n".join(f"{k}={v}" for k, v in sorted(received.items())).encode()
        elif path == "/echobody":
            payload = body
        elif path == "/big":
            payload = b"x" * 4096
        else:
            payload = b"origin fixture body"
        self.wfile.write(b"HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\n"
                         b"Content-Length: " + str(len(payload)).encode("ascii")
                         + b"\r\n\r\n" + payload)


@pytest.fixture
def origin():
    server = _OriginServer(("127.0.0.1", 0), _OriginHandler)
    server.seen = []
    thread = threading.Thread(target=server.serve_forever,
                              kwargs={"poll_interval": 0.05}, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()


def origin_url(server, path="/hello"):
    host, port = server.server_address[:2]
    return f"http://{host}:{port}{path}"


@contextlib.contextmanager
def running_proxy(**kw):
    px = ProxyServer(host="127.0.0.1", port=0, **kw)
    px.start()
    try:
        yield px
    finally:
        px.stop()


def proxy_fetch(addr, url, method="GET", headers=(), body=b""):
    """Issue one absolute-URI request through the proxy; read to close."""
    lines = [f"{method} {url} HTTP/1.1"]
    lines += [f"{k}: {v}" for k, v in headers]
    if body:
        lines.append(f"Content-Length: {len(body)}")
    with socket.create_connection(addr, timeout=10) as sock:
        sock.sendall("\r\n".join(lines).encode("latin-1") + b"\r\n\r\n" + body)
        data = b""
        while True:
            chunk = sock.recv(65536)
            if not chunk:
                break
            data += chunk
    head, _, rest = data.partition(b"\r\n\r\n")
    head_lines = head.split(b"\r\n")
    status = int(head_lines[0].split(b" ", 2)[1])
    received = {}
    for hline in head_lines[1:]:
        name, _, value = hline.decode("latin-1").partition(":")
        received[name.strip().lower()] = value.strip()
    return status, received, rest


def _unused_port() -> int:
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        return probe.getsockname()[1]


# --- proxy without a gateway ---

def test_proxy_forwards_origin_body(origin):
    with running_proxy() as px:
        status, headers, body = proxy_fetch(px.address, origin_url(origin))
    assert status == 200
    assert body == b"origin fixture body"
    assert headers["content-length"] == str(len(body))
    assert headers["connection"] == "close"


def test_proxy_normalizes_chunked_to_content_length(origin):
    with running_proxy() as px:
        status, headers, body = proxy_fetch(px.address, origin_url(origin, "/chunked"))
    assert status == 200
    assert body == b"chunk1 chunk2"
    assert headers["content-length"] == "13"
    assert "transfer-encoding" not in headers


def test_proxy_adds_via_and_strips_hop_by_hop(origin):
    with running_proxy() as px:
        status, _, body = proxy_fetch(
            px.address, origin_url(origin, "/echoheaders"),
            headers=[("Host", "ignored.test"), ("X-Custom", "abc"),
                     ("Proxy-Connection", "keep-alive"), ("Keep-Alive", "timeout=5")])
    assert status == 200
    _, _, received, _ = origin.seen[0]
    assert received["via"] == "1.1 websift"
    assert received["x-custom"] == "abc"
    assert "proxy-connection" not in received
    assert "keep-alive" not in received
    assert b"via=1.1 websift" in body


def test_proxy_upstream_refused_yields_502(origin):
    with running_proxy() as px:
        status, _, body = proxy_fetch(px.address, f"http://127.0.0.1:{_unused_port()}/x")
    assert status == 502
    assert b"upstream fetch failed" in body


def test_proxy_rejects_connect_and_relative_targets(origin):
    with running_proxy() as px:
        status, _, _ = proxy_fetch(px.address, "example.test:443", method="CONNECT")
        assert status == 405
        status, _, _ = proxy_fetch(px.address, "/no-scheme")
        assert status == 400


def test_proxy_truncates_oversized_bodies(origin):
    with running_proxy(max_body=64) as px:
        status, headers, body = proxy_fetch(px.address, origin_url(origin, "/big"))
    assert status == 200
    assert body == b"x" * 64
    assert headers["content-length"] == "64"


# --- proxy + gateway end to end ---

def test_proxy_gateway_records_exchange(origin):
    emitted = []
    with running_gateway(emit=emitted.append) as gw:
        with running_proxy(gateway_addr=gw.address) as px:
            status, _, body = proxy_fetch(
                px.address, origin_url(origin),
                headers=[("X-Websift-Agent", "agent-7"), ("X-Websift-Seeder", "malware")])
    assert status == 200
    assert body == b"origin fixture body"
    assert len(emitted) == 1
    record = emitted[0]
    assert record.exchange.body == b"origin fixture body"
    assert record.exchange.agent_id == "agent-7"
    assert record.exchange.seeder_tag == "malware"
    assert record.exchange.response.status == 200
    assert record.markers["wire.upstream_ip"] == "127.0.0.1"
    assert record.exchange.started_at > 0


def test_proxy_gateway_unknown_seeder_coerced_to_benign(origin):
    emitted = []
    with running_gateway(emit=emitted.append) as gw:
        with running_proxy(gateway_addr=gw.address) as px:
            proxy_fetch(px.address, origin_url(origin),
                        headers=[("X-Websift-Seeder", "parked")])
    assert emitted[0].exchange.seeder_tag == "benign"


def test_proxy_gateway_emits_fetch_errors(origin):
    emitted = []
    with running_gateway(emit=emitted.append) as gw:
        with running_proxy(gateway_addr=gw.address) as px:
            status, _, _ = proxy_fetch(px.address, f"http://127.0.0.1:{_unused_port()}/x")
    assert status == 502
    assert len(emitted) == 1
    assert emitted[0].exchange.response.status == 502
    assert "wire.fetch_error" in emitted[0].markers


def test_proxy_gateway_captures_request_body(origin):
    emitted = []
    with running_gateway(emit=emitted.append) as gw:
        with running_proxy(gateway_addr=gw.address) as px:
            status, _, body = proxy_fetch(
                px.address, origin_url(origin, "/echobody"),
                method="POST", body=b"field=7&commit=yes")
    assert status == 200
    assert body == b"field=7&commit=yes"
    assert len(emitted) == 1
    assert emitted[0].request_body == b"field=7&commit=yes"
    _, _, _, origin_body = origin.seen[0]
    assert origin_body == b"field=7&commit=yes"


def test_proxy_gateway_flags_truncation(origin):
    emitted = []
    with running_gateway(emit=emitted.append) as gw:
        with running_proxy(gateway_addr=gw.address, max_body=64) as px:
            status, headers, body = proxy_fetch(px.address, origin_url(origin, "/big"))
    assert status == 200
    assert body == b"x" * 64
    assert headers["content-length"] == "64"
    assert emitted[0].markers["wire.truncated"] == "true"
    assert emitted[0].exchange.body == b"x" * 64


def test_proxy_fail_closed_when_gateway_down(origin):
    dead = ("127.0.0.1", _unused_port())
    with running_proxy(gateway_addr=dead, fail_policy="closed") as px:
        status, _, body = proxy_fetch(px.address, origin_url(origin))
    assert status == 502
    assert b"fail-closed" in body


def test_proxy_fail_open_flags_uninspected(origin):
    fallback = []
    dead = ("127.0.0.1", _unused_port())
    with running_proxy(gateway_addr=dead, fail_policy="open",
                       emit_fallback=fallback.append) as px:
        status, _, body = proxy_fetch(px.address, origin_url(origin))
    assert status == 200
    assert body == b"origin fixture body"
    assert len(fallback) == 1
    assert fallback[0].markers["wire.uninspected"] == "true"
    assert fallback[0].exchange.body == b"origin fixture body"


def test_proxy_rejects_unknown_fail_policy():
    with pytest.raises(ValueError):
        ProxyServer(fail_policy="retry")


def test_proxy_gateway_enforce_rewrites_client_response(origin):
    emitted = []
    with running_gateway(mode="enforce", emit=emitted.append,
                         verdict_fn=lambda ex: _Verdict(True)) as gw:
        with running_proxy(gateway_addr=gw.address) as px:
            status, headers, body = proxy_fetch(px.address, origin_url(origin))
    assert status == 200
    assert body == WARNING_PAGE
    assert headers["x-websift-blocked"] == "malware"
    # the stored exchange keeps the unmodified origin body
    assert len(emitted) == 1
    assert emitted[0].exchange.body == b"origin fixture body"


def test_proxy_gateway_enforce_leaves_benign_untouched(origin):
    with running_gateway(mode="enforce",
                         verdict_fn=lambda ex: _Verdict(False)) as gw:
        with running_proxy(gateway_addr=gw.address) as px:
            status, _, body = proxy_fetch(px.address, origin_url(origin))
    assert status == 200
    assert body == b"origin fixture body"
