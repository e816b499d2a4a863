"""ICAP gateway (RFC 3507 subset) and the HTTP/1.1 forward proxy feeding it.

The proxy accepts absolute-URI requests, submits the request to the
gateway via REQMOD, fetches the origin response, submits the pair via
RESPMOD, and relays the (possibly rewritten) response to the client.
The gateway builds one HttpExchange per RESPMOD and hands it to an
emission callback; in enforce mode a synchronous verdict can replace the
response body with a warning page.  Everything runs on plain TCP sockets
so the two halves can also interoperate with foreign ICAP peers.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time
import uuid
from dataclasses import dataclass, field
from urllib.parse import urlsplit

CRLF = b"\r\n"
ICAP_VERSION = "ICAP/1.0"
DEFAULT_ICAP_PORT = 1344
DEFAULT_PROXY_PORT = 3128
MAX_BODY_SIZE = 64 * 1024 * 1024
ICAP_METHODS = ("OPTIONS", "REQMOD", "RESPMOD")
SEEDER_TAGS = ("benign", "malware", "phishing")

_BODY_TOKENS = ("req-body", "res-body", "null-body", "opt-body")
_SECTION_TOKENS = ("req-hdr", "res-hdr") + _BODY_TOKENS

_HOP_BY_HOP = frozenset(
    ["connection", "proxy-connection", "keep-alive", "te", "trailer",
     "transfer-encoding", "upgrade", "proxy-authorization"]
)

WARNING_PAGE = (
    b"<html><head><title>Blocked</title></head><body>"
    b"<h1>Access blocked</h1>"
    b"<p>The requested content was classified as malicious and has been "
    b"withheld by the inspection gateway.</p></body></html>"
)


# ---------------------------------------------------------------------------
# core exchange types

@dataclass
class HttpRequest:
    method: str
    url: str
    headers: list[tuple[str, str]] = field(default_factory=list)

    def header(self, name: str) -> str | None:
        low = name.lower()
        for k, v in self.headers:
            if k.lower() == low:
                return v
        return None

    def to_doc(self) -> dict:
        return {"method": self.method, "url": self.url,
                "headers": [[k, v] for k, v in self.headers]}

    @classmethod
    def from_doc(cls, doc: dict) -> "HttpRequest":
        return cls(doc["method"], doc["url"], [tuple(h) for h in doc["headers"]])


@dataclass
class HttpResponse:
    status: int
    reason: str = ""
    headers: list[tuple[str, str]] = field(default_factory=list)

    def header(self, name: str) -> str | None:
        low = name.lower()
        for k, v in self.headers:
            if k.lower() == low:
                return v
        return None

    def to_doc(self) -> dict:
        return {"status": self.status, "reason": self.reason,
                "headers": [[k, v] for k, v in self.headers]}

    @classmethod
    def from_doc(cls, doc: dict) -> "HttpResponse":
        return cls(doc["status"], doc.get("reason", ""),
                   [tuple(h) for h in doc["headers"]])


@dataclass
class HttpExchange:
    """One proxied request/response pair with capture metadata.

    `body` holds the entity bytes as delivered by the server (content
    codings intact, transfer framing removed); started_at is a UTC epoch
    timestamp in milliseconds.
    """

    request: HttpRequest
    response: HttpResponse
    body: bytes = b""
    started_at: int = 0
    agent_id: str = ""
    seeder_tag: str = "benign"

    def validate(self) -> None:
        parts = urlsplit(self.request.url)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            raise ValueError(f"exchange URL must be absolute: {self.request.url!r}")
        if self.seeder_tag not in SEEDER_TAGS:
            raise ValueError(f"unknown seeder tag {self.seeder_tag!r}")
        if self.started_at < 0:
            raise ValueError("started_at must be a non-negative epoch timestamp")

    def to_doc(self) -> dict:
        # body is stored out of band, referenced by digest
        return {
            "request": self.request.to_doc(),
            "response": self.response.to_doc(),
            "started_at": self.started_at,
            "agent_id": self.agent_id,
            "seeder_tag": self.seeder_tag,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "HttpExchange":
        return cls(
            request=HttpRequest.from_doc(doc["request"]),
            response=HttpResponse.from_doc(doc["response"]),
            body=b"",
            started_at=doc["started_at"],
            agent_id=doc.get("agent_id", ""),
            seeder_tag=doc.get("seeder_tag", "benign"),
        )


@dataclass
class EmittedExchange:
    """What the gateway hands to the pipeline for each proxied exchange."""

    exchange: HttpExchange
    markers: dict[str, str] = field(default_factory=dict)
    verdict: object | None = None  # FastVerdict when a verdict_fn ran
    request_body: bytes | None = None


# ---------------------------------------------------------------------------
# parse errors

class IcapParseError(ValueError):
    """Base class; `position` is the byte offset the problem was found at."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


class TruncatedMessageError(IcapParseError):
    pass


class RequestLineError(IcapParseError):
    pass


class HeaderSyntaxError(IcapParseError):
    pass


class MissingEncapsulatedError(IcapParseError):
    pass


class EncapsulatedOffsetsError(IcapParseError):
    pass


class ChunkedBodyError(IcapParseError):
    pass


# ---------------------------------------------------------------------------
# message model

@dataclass
class IcapMessage:
    method: str
    uri: str
    version: str
    headers: list[tuple[str, str]]
    encapsulated: list[tuple[str, int]]
    sections: dict[str, bytes]  # body section stored de-chunked

    def header(self, name: str) -> str | None:
        low = name.lower()
        for k, v in self.headers:
            if k.lower() == low:
                return v
        return None

    def body_token(self) -> str | None:
        for token, _ in self.encapsulated:
            if token in _BODY_TOKENS:
                return token
        return None


@dataclass
class IcapResponse:
    status: int
    reason: str
    headers: list[tuple[str, str]] = field(default_factory=list)
    # (token, raw bytes); a *-body section holds the un-chunked payload
    sections: list[tuple[str, bytes]] = field(default_factory=list)

    def header(self, name: str) -> str | None:
        low = name.lower()
        for k, v in self.headers:
            if k.lower() == low:
                return v
        return None

    def section(self, token: str) -> bytes | None:
        for t, data in self.sections:
            if t == token:
                return data
        return None

    def to_bytes(self) -> bytes:
        parts: list[bytes] = []
        offsets: list[str] = []
        pos = 0
        has_body = False
        for token, data in self.sections:
            if token in _BODY_TOKENS:
                offsets.append(f"{token}={pos}")
                if token != "null-body":
                    parts.append(_chunk_encode(data))
                has_body = True
            else:
                offsets.append(f"{token}={pos}")
                parts.append(data)
                pos += len(data)
        if not has_body:
            offsets.append(f"null-body={pos}")
        head = [f"{ICAP_VERSION} {self.status} {self.reason}".encode("latin-1")]
        for k, v in self.headers:
            head.append(f"{k}: {v}".encode("latin-1"))
        head.append(b"Encapsulated: " + ", ".join(offsets).encode("latin-1"))
        return CRLF.join(head) + CRLF + CRLF + b"".join(parts)


def _chunk_encode(data: bytes) -> bytes:
    if not data:
        return b"0" + CRLF + CRLF
    return (b"%x" % len(data)) + CRLF + data + CRLF + b"0" + CRLF + CRLF


def _dechunk_at(raw: bytes, start: int, base: int = 0) -> tuple[bytes, int]:
    """Decode a chunked body starting at `start`; returns (data, end).

    `base` rebases error positions so they refer to the full message.
    """
    out = bytearray()
    i = start
    n = len(raw)
    while True:
        j = raw.find(CRLF, i)
        if j < 0:
            raise ChunkedBodyError("truncated chunked body: missing size line", base + i)
        token = raw[i:j].split(b";", 1)[0].strip()
        try:
            size = int(token, 16)
        except ValueError:
            raise ChunkedBodyError(f"bad chunk size {token!r}", base + i)
        i = j + 2
        if size == 0:
            while True:
                k = raw.find(CRLF, i)
                if k < 0:
                    raise ChunkedBodyError("truncated chunked body: missing final CRLF",
                                           base + i)
                line = raw[i:k]
                i = k + 2
                if not line:
                    return bytes(out), i
        if i + size + 2 > n:
            raise ChunkedBodyError("truncated chunked body: incomplete chunk data", base + i)
        out += raw[i:i + size]
        i += size
        if raw[i:i + 2] != CRLF:
            raise ChunkedBodyError("missing chunk data terminator", base + i)
        i += 2


def _parse_head(raw: bytes) -> tuple[list[bytes], int]:
    """Split the ICAP head into lines; returns (lines, payload offset)."""
    end = raw.find(b"\r\n\r\n")
    if end < 0:
        raise TruncatedMessageError("incomplete ICAP head", len(raw))
    return raw[:end].split(CRLF), end + 4


def _parse_header_lines(lines: list[bytes], base_pos: int) -> list[tuple[str, str]]:
    headers = []
    pos = base_pos
    for line in lines:
        if b":" not in line:
            raise HeaderSyntaxError(f"malformed header line {line!r}", pos)
        name, _, value = line.partition(b":")
        headers.append((name.decode("latin-1").strip(), value.decode("latin-1").strip()))
        pos += len(line) + 2
    return headers


def _parse_encapsulated(value: str, position: int) -> list[tuple[str, int]]:
    entries: list[tuple[str, int]] = []
    for chunk in value.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        name, _, num = chunk.partition("=")
        name = name.strip()
        if name not in _SECTION_TOKENS or not num.strip().isdigit():
            raise EncapsulatedOffsetsError(f"bad Encapsulated entry {chunk!r}", position)
        entries.append((name, int(num.strip())))
    if not entries:
        raise EncapsulatedOffsetsError("empty Encapsulated header", position)
    if entries[0][1] != 0:
        raise EncapsulatedOffsetsError("first encapsulated offset must be 0", position)
    offsets = [off for _, off in entries]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise EncapsulatedOffsetsError("encapsulated offsets not strictly increasing", position)
    body_tokens = [t for t, _ in entries if t in _BODY_TOKENS]
    if len(body_tokens) != 1 or entries[-1][0] not in _BODY_TOKENS:
        raise EncapsulatedOffsetsError("exactly one body token must come last", position)
    return entries


def _split_sections(payload: bytes, entries: list[tuple[str, int]],
                    payload_base: int) -> dict[str, bytes]:
    sections: dict[str, bytes] = {}
    for idx, (token, off) in enumerate(entries):
        if token in _BODY_TOKENS:
            if token == "null-body":
                if len(payload) != off:
                    raise EncapsulatedOffsetsError(
                        "payload length disagrees with null-body offset",
                        payload_base + len(payload))
            else:
                if off > len(payload):
                    raise TruncatedMessageError("payload shorter than body offset",
                                                payload_base + len(payload))
                data, end = _dechunk_at(payload, off, payload_base)
                if end != len(payload):
                    raise ChunkedBodyError("trailing bytes after final chunk",
                                           payload_base + end)
                sections[token] = data
            return sections
        next_off = entries[idx + 1][1]
        if next_off > len(payload):
            raise TruncatedMessageError("payload shorter than declared sections",
                                        payload_base + len(payload))
        sections[token] = payload[off:next_off]
    return sections


def parse_icap(raw: bytes) -> IcapMessage:
    """Parse a complete ICAP request message."""
    head_lines, payload_off = _parse_head(raw)
    request_line = head_lines[0]
    parts = request_line.split(b" ")
    if len(parts) != 3 or not parts[2].startswith(b"ICAP/") or not parts[0]:
        raise RequestLineError(f"malformed request line {request_line!r}", 0)
    method = parts[0].decode("latin-1")
    uri = parts[1].decode("latin-1")
    version = parts[2].decode("latin-1")
    headers = _parse_header_lines(head_lines[1:], len(request_line) + 2)
    payload = raw[payload_off:]

    enc_value = None
    enc_pos = len(request_line) + 2
    for line in head_lines[1:]:
        if line.lower().startswith(b"encapsulated:"):
            enc_value = line.partition(b":")[2].decode("latin-1").strip()
            break
        enc_pos += len(line) + 2

    if enc_value is None:
        if method in ("REQMOD", "RESPMOD") or payload:
            raise MissingEncapsulatedError(
                f"{method} requires an Encapsulated header", payload_off)
        return IcapMessage(method, uri, version, headers, [], {})

    entries = _parse_encapsulated(enc_value, enc_pos)
    sections = _split_sections(payload, entries, payload_off)
    return IcapMessage(method, uri, version, headers, entries, sections)


def parse_icap_response(raw: bytes) -> IcapResponse:
    """Parse a complete ICAP response message."""
    head_lines, payload_off = _parse_head(raw)
    status_line = head_lines[0]
    parts = status_line.split(b" ", 2)
    if len(parts) < 2 or not parts[0].startswith(b"ICAP/") or not parts[1].isdigit():
        raise RequestLineError(f"malformed status line {status_line!r}", 0)
    status = int(parts[1])
    reason = parts[2].decode("latin-1") if len(parts) > 2 else ""
    headers = _parse_header_lines(head_lines[1:], len(status_line) + 2)
    payload = raw[payload_off:]

    enc_value = None
    for k, v in headers:
        if k.lower() == "encapsulated":
            enc_value = v
            break
    sections: list[tuple[str, bytes]] = []
    if enc_value is not None:
        entries = _parse_encapsulated(enc_value, payload_off)
        split = _split_sections(payload, entries, payload_off)
        sections = [(t, data) for t, data in split.items()]
    return IcapResponse(status, reason, headers, sections)


# ---------------------------------------------------------------------------
# encapsulation of exchanges

def _serialize_request_head(req: HttpRequest) -> bytes:
    lines = [f"{req.method} {req.url} HTTP/1.1".encode("latin-1")]
    for k, v in req.headers:
        lines.append(f"{k}: {v}".encode("latin-1"))
    return CRLF.join(lines) + CRLF + CRLF


def _serialize_response_head(resp: HttpResponse) -> bytes:
    reason = resp.reason or "OK"
    lines = [f"HTTP/1.1 {resp.status} {reason}".encode("latin-1")]
    for k, v in resp.headers:
        lines.append(f"{k}: {v}".encode("latin-1"))
    return CRLF.join(lines) + CRLF + CRLF


def _metadata_headers(exchange: HttpExchange, exchange_id: str,
                      markers: dict[str, str]) -> list[tuple[str, str]]:
    out = [
        ("X-Exchange-Id", exchange_id),
        ("X-Exchange-Started", str(exchange.started_at)),
        ("X-Exchange-Agent", exchange.agent_id),
        ("X-Exchange-Seeder", exchange.seeder_tag),
    ]
    for key in sorted(markers):
        out.append(("X-Exchange-Marker", f"{key}={markers[key]}"))
    return out


def encapsulate(exchange: HttpExchange, icap_host: str = "gateway",
                exchange_id: str = "", markers: dict[str, str] | None = None) -> bytes:
    """Build a RESPMOD request carrying the full exchange."""
    exchange.validate()
    req_hdr = _serialize_request_head(exchange.request)
    res_hdr = _serialize_response_head(exchange.response)
    if exchange.body:
        enc = f"req-hdr=0, res-hdr={len(req_hdr)}, res-body={len(req_hdr) + len(res_hdr)}"
        body = _chunk_encode(exchange.body)
    else:
        enc = f"req-hdr=0, res-hdr={len(req_hdr)}, null-body={len(req_hdr) + len(res_hdr)}"
        body = b""
    head = [f"RESPMOD icap://{icap_host}/respmod {ICAP_VERSION}".encode("latin-1"),
            f"Host: {icap_host}".encode("latin-1")]
    for k, v in _metadata_headers(exchange, exchange_id, markers or {}):
        head.append(f"{k}: {v}".encode("latin-1"))
    head.append(b"Encapsulated: " + enc.encode("latin-1"))
    return CRLF.join(head) + CRLF + CRLF + req_hdr + res_hdr + body


def build_reqmod(request: HttpRequest, body: bytes = b"",
                 icap_host: str = "gateway", exchange_id: str = "") -> bytes:
    """Build a REQMOD request for the client-side half of an exchange."""
    req_hdr = _serialize_request_head(request)
    if body:
        enc = f"req-hdr=0, req-body={len(req_hdr)}"
        payload = req_hdr + _chunk_encode(body)
    else:
        enc = f"req-hdr=0, null-body={len(req_hdr)}"
        payload = req_hdr
    head = [f"REQMOD icap://{icap_host}/reqmod {ICAP_VERSION}".encode("latin-1"),
            f"Host: {icap_host}".encode("latin-1"),
            f"X-Exchange-Id: {exchange_id}".encode("latin-1"),
            b"Encapsulated: " + enc.encode("latin-1")]
    return CRLF.join(head) + CRLF + CRLF + payload


def _parse_http_request_head(raw: bytes) -> HttpRequest:
    lines = raw.rstrip(b"\r\n").split(CRLF)
    parts = lines[0].split(b" ")
    if len(parts) != 3:
        raise ValueError(f"malformed encapsulated request line {lines[0]!r}")
    headers = []
    for line in lines[1:]:
        if not line:
            continue
        name, _, value = line.partition(b":")
        headers.append((name.decode("latin-1").strip(), value.decode("latin-1").strip()))
    return HttpRequest(parts[0].decode("latin-1"), parts[1].decode("latin-1"), headers)


def _parse_http_response_head(raw: bytes) -> HttpResponse:
    lines = raw.rstrip(b"\r\n").split(CRLF)
    parts = lines[0].split(b" ", 2)
    if len(parts) < 2 or not parts[1].isdigit():
        raise ValueError(f"malformed encapsulated status line {lines[0]!r}")
    headers = []
    for line in lines[1:]:
        if not line:
            continue
        name, _, value = line.partition(b":")
        headers.append((name.decode("latin-1").strip(), value.decode("latin-1").strip()))
    return HttpResponse(int(parts[1]), parts[2].decode("latin-1") if len(parts) > 2 else "",
                        headers)


def exchange_from_respmod(msg: IcapMessage) -> tuple[HttpExchange, str, dict[str, str]]:
    """Rebuild (exchange, exchange_id, markers) from a parsed RESPMOD."""
    if "req-hdr" not in msg.sections or "res-hdr" not in msg.sections:
        raise ValueError("RESPMOD must carry req-hdr and res-hdr sections")
    request = _parse_http_request_head(msg.sections["req-hdr"])
    response = _parse_http_response_head(msg.sections["res-hdr"])
    body = msg.sections.get("res-body", b"")
    started = msg.header("X-Exchange-Started")
    agent = msg.header("X-Exchange-Agent") or ""
    seeder = msg.header("X-Exchange-Seeder") or "benign"
    markers: dict[str, str] = {}
    for k, v in msg.headers:
        if k.lower() == "x-exchange-marker" and "=" in v:
            key, _, val = v.partition("=")
            markers[key.strip()] = val.strip()
    exchange = HttpExchange(
        request=request,
        response=response,
        body=body,
        started_at=int(started) if started and started.isdigit() else 0,
        agent_id=agent,
        seeder_tag=seeder if seeder in SEEDER_TAGS else "benign",
    )
    return exchange, msg.header("X-Exchange-Id") or "", markers


# ---------------------------------------------------------------------------
# gateway service logic

def _rewrite_blocked(response: HttpResponse, page: bytes) -> tuple[HttpResponse, bytes]:
    kept = [(k, v) for k, v in response.headers
            if k.lower() not in ("content-length", "content-encoding",
                                 "content-type", "transfer-encoding")]
    kept.append(("Content-Type", "text/html; charset=utf-8"))
    kept.append(("Content-Length", str(len(page))))
    kept.append(("X-Websift-Blocked", "malware"))
    return HttpResponse(response.status, response.reason, kept), page


def serve_icap(msg: IcapMessage, mode: str = "collect", verdict_fn=None,
               emit=None, istag: str = '"websift-default"',
               reqmod_bodies: dict[str, bytes] | None = None,
               warning_page: bytes = WARNING_PAGE) -> IcapResponse:
    """Dispatch one parsed ICAP message; returns the response to send.

    mode: "collect" never modifies; "enforce" replaces the body of
    responses whose synchronous verdict is malware.  `emit` receives an
    EmittedExchange for every RESPMOD, including enforce rewrites.
    """
    if mode not in ("collect", "enforce"):
        raise ValueError(f"unknown gateway mode {mode!r}")
    base_headers = [("ISTag", istag)]

    if msg.method == "OPTIONS":
        return IcapResponse(200, "OK", [
            ("Methods", "RESPMOD, REQMOD"),
            ("ISTag", istag),
            ("Allow", "204"),
            ("Preview", "0"),
            ("Max-Connections", "64"),
        ])

    if msg.method == "REQMOD":
        body = msg.sections.get("req-body")
        if body is not None and reqmod_bodies is not None:
            exchange_id = msg.header("X-Exchange-Id")
            if exchange_id:
                reqmod_bodies[exchange_id] = body
        return IcapResponse(204, "No modifications", base_headers)

    if msg.method == "RESPMOD":
        try:
            exchange, exchange_id, markers = exchange_from_respmod(msg)
        except ValueError:
            return IcapResponse(500, "Bad encapsulated HTTP", base_headers)
        request_body = None
        if reqmod_bodies is not None and exchange_id:
            request_body = reqmod_bodies.pop(exchange_id, None)
        verdict = None
        emitted = EmittedExchange(exchange, markers, None, request_body)
        try:
            if verdict_fn is not None:
                verdict = verdict_fn(exchange)
                emitted.verdict = verdict
            if emit is not None:
                emit(emitted)
        except Exception as exc:  # pipeline refusal: report, never crash the wire
            markers["wire.gateway_error"] = type(exc).__name__
            return IcapResponse(500, "Pipeline refused exchange", base_headers)
        if mode == "enforce" and verdict is not None and getattr(verdict, "is_malware", False):
            blocked, page = _rewrite_blocked(exchange.response, warning_page)
            return IcapResponse(200, "OK", base_headers, [
                ("res-hdr", _serialize_response_head(blocked)),
                ("res-body", page),
            ])
        return IcapResponse(204, "No modifications", base_headers)

    return IcapResponse(405, "Method not allowed", base_headers)


# ---------------------------------------------------------------------------
# socket framing helpers

def _read_icap_wire_message(rfile) -> bytes | None:
    """Read one framed ICAP message from a socket file; None on clean EOF."""
    head = bytearray()
    first = rfile.readline()
    if not first:
        return None
    head += first
    while True:
        line = rfile.readline()
        if not line:
            raise TruncatedMessageError("connection closed inside ICAP head", len(head))
        head += line
        if line == CRLF:
            break
    enc_value = None
    for raw_line in bytes(head).split(CRLF):
        if raw_line.lower().startswith(b"encapsulated:"):
            enc_value = raw_line.partition(b":")[2].decode("latin-1").strip()
            break
    if enc_value is None:
        return bytes(head)
    entries = _parse_encapsulated(enc_value, 0)
    body_token, body_off = entries[-1]
    payload = bytearray(_read_exact(rfile, body_off, len(head)))
    if body_token != "null-body":
        payload += _read_chunked_wire(rfile, len(head) + body_off)
    return bytes(head) + bytes(payload)


def _read_exact(rfile, n: int, base: int) -> bytes:
    data = rfile.read(n)
    if len(data) != n:
        raise TruncatedMessageError("connection closed inside payload", base + len(data))
    return data


def _read_chunked_wire(rfile, base: int) -> bytes:
    out = bytearray()
    while True:
        size_line = rfile.readline()
        if not size_line:
            raise ChunkedBodyError("connection closed before chunk size", base + len(out))
        out += size_line
        token = size_line.strip().split(b";", 1)[0]
        try:
            size = int(token, 16)
        except ValueError:
            raise ChunkedBodyError(f"bad chunk size {token!r} on wire", base + len(out))
        if size == 0:
            while True:
                line = rfile.readline()
                if not line:
                    raise ChunkedBodyError("connection closed in trailers", base + len(out))
                out += line
                if line == CRLF:
                    return bytes(out)
        out += _read_exact(rfile, size + 2, base + len(out))


# ---------------------------------------------------------------------------
# gateway server

class _ThreadedServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class IcapGateway:
    """TCP ICAP server wrapping serve_icap."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 mode: str = "collect", verdict_fn=None, emit=None,
                 warning_page: bytes = WARNING_PAGE):
        if mode not in ("collect", "enforce"):
            raise ValueError(f"unknown gateway mode {mode!r}")
        self.mode = mode
        self.verdict_fn = verdict_fn
        self.warning_page = warning_page
        self.istag = f'"WS-{uuid.uuid4().hex[:12]}"'
        self.reqmod_bodies: dict[str, bytes] = {}
        self.refused: list[EmittedExchange] = []
        if emit is None:
            self.emit = None
        else:
            def _emit(emitted: EmittedExchange) -> None:
                try:
                    emit(emitted)
                except Exception:
                    # keep the exchange reachable even when the pipeline balks
                    emitted.markers["wire.emit_refused"] = "true"
                    self.refused.append(emitted)
                    raise
            self.emit = _emit
        gateway = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                try:
                    raw = _read_icap_wire_message(self.rfile)
                except IcapParseError:
                    self.wfile.write(IcapResponse(400, "Bad request",
                                                  [("ISTag", gateway.istag)]).to_bytes())
                    return
                if raw is None:
                    return
                try:
                    msg = parse_icap(raw)
                    response = serve_icap(
                        msg, gateway.mode, gateway.verdict_fn, gateway.emit,
                        gateway.istag, gateway.reqmod_bodies, gateway.warning_page)
                except IcapParseError:
                    response = IcapResponse(400, "Bad request", [("ISTag", gateway.istag)])
                try:
                    self.wfile.write(response.to_bytes())
                except OSError:
                    pass

        self._server = _ThreadedServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "IcapGateway":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def icap_transact(addr: tuple[str, int], raw: bytes, timeout: float = 10.0) -> IcapResponse:
    """Send one ICAP message and read the response over a fresh connection."""
    with socket.create_connection(addr, timeout=timeout) as sock:
        sock.sendall(raw)
        rfile = sock.makefile("rb")
        data = _read_icap_wire_message(rfile)
        if data is None:
            raise ConnectionError("ICAP peer closed without responding")
        return parse_icap_response(data)


# ---------------------------------------------------------------------------
# forward proxy

class ProxyError(Exception):
    pass


def _read_http_headers(rfile, base: int) -> list[tuple[str, str]]:
    headers = []
    pos = base
    while True:
        line = rfile.readline()
        if not line:
            raise ProxyError(f"connection closed inside headers at byte {pos}")
        pos += len(line)
        if line in (CRLF, b"\n"):
            return headers
        name, _, value = line.rstrip(b"\r\n").partition(b":")
        headers.append((name.decode("latin-1").strip(), value.decode("latin-1").strip()))


def _read_sized(rfile, length: int, cap: int) -> tuple[bytes, bool]:
    """Read up to `length` bytes, truncating at cap."""
    take = min(length, cap)
    data = rfile.read(take)
    truncated = False
    if length > cap:
        truncated = True
        remaining = length - cap
        while remaining > 0:
            skip = rfile.read(min(65536, remaining))
            if not skip:
                break
            remaining -= len(skip)
    return data, truncated


def _read_chunked_entity(rfile, cap: int) -> tuple[bytes, bool]:
    out = bytearray()
    truncated = False
    while True:
        size_line = rfile.readline()
        if not size_line:
            raise ProxyError("connection closed before chunk size")
        try:
            size = int(size_line.strip().split(b";", 1)[0], 16)
        except ValueError:
            raise ProxyError(f"bad chunk size line {size_line!r}")
        if size == 0:
            while True:
                line = rfile.readline()
                if not line or line == CRLF:
                    return bytes(out), truncated
        data = rfile.read(size + 2)
        if len(data) != size + 2:
            raise ProxyError("connection closed inside chunk")
        if not truncated:
            room = cap - len(out)
            if size > room:
                out += data[:room]
                truncated = True
            else:
                out += data[:size]
    # not reached


def _read_to_close(rfile, cap: int) -> tuple[bytes, bool]:
    out = bytearray()
    truncated = False
    while True:
        data = rfile.read(65536)
        if not data:
            return bytes(out), truncated
        if not truncated:
            room = cap - len(out)
            if len(data) > room:
                out += data[:room]
                truncated = True
            else:
                out += data


def _fetch_upstream(request: HttpRequest, body: bytes, timeout: float,
                    cap: int, via_token: str) -> tuple[HttpResponse, bytes, bool, str]:
    """Fetch the origin response; returns (response, entity, truncated, peer ip)."""
    parts = urlsplit(request.url)
    if parts.scheme != "http":
        raise ProxyError(f"unsupported scheme {parts.scheme!r}")
    host = parts.hostname or ""
    port = parts.port or 80
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query

    out_headers: list[tuple[str, str]] = []
    saw_host = False
    for k, v in request.headers:
        low = k.lower()
        if low in _HOP_BY_HOP:
            continue
        if low == "host":
            saw_host = True
        out_headers.append((k, v))
    if not saw_host:
        out_headers.insert(0, ("Host", parts.netloc))
    out_headers.append(("Via", f"1.1 {via_token}"))
    out_headers.append(("Connection", "close"))

    with socket.create_connection((host, port), timeout=timeout) as sock:
        peer_ip = sock.getpeername()[0]
        lines = [f"{request.method} {path} HTTP/1.1".encode("latin-1")]
        for k, v in out_headers:
            lines.append(f"{k}: {v}".encode("latin-1"))
        sock.sendall(CRLF.join(lines) + CRLF + CRLF + body)
        rfile = sock.makefile("rb")
        status_line = rfile.readline()
        if not status_line:
            raise ProxyError("origin closed without a status line")
        sp = status_line.rstrip(b"\r\n").split(b" ", 2)
        if len(sp) < 2 or not sp[1].isdigit():
            raise ProxyError(f"malformed origin status line {status_line!r}")
        status = int(sp[1])
        reason = sp[2].decode("latin-1") if len(sp) > 2 else ""
        headers = _read_http_headers(rfile, len(status_line))

        te = [t.strip().lower() for k, v in headers
              if k.lower() == "transfer-encoding" for t in v.split(",")]
        cl = next((v for k, v in headers if k.lower() == "content-length"), None)
        if "chunked" in te:
            entity, truncated = _read_chunked_entity(rfile, cap)
            # normalize framing: entity bytes are unchanged, framing becomes CL
            headers = [(k, v) for k, v in headers
                       if k.lower() not in ("transfer-encoding", "content-length")]
            headers.append(("Content-Length", str(len(entity))))
        elif cl is not None and cl.strip().isdigit():
            entity, truncated = _read_sized(rfile, int(cl.strip()), cap)
        elif request.method == "HEAD" or status in (204, 304):
            entity, truncated = b"", False
        else:
            entity, truncated = _read_to_close(rfile, cap)
        return HttpResponse(status, reason, headers), entity, truncated, peer_ip


def _client_response_bytes(response: HttpResponse, body: bytes) -> bytes:
    reason = response.reason or "OK"
    lines = [f"HTTP/1.1 {response.status} {reason}".encode("latin-1")]
    wrote_cl = False
    for k, v in response.headers:
        if k.lower() in ("transfer-encoding", "connection"):
            continue
        if k.lower() == "content-length":
            if wrote_cl:
                continue
            v = str(len(body))
            wrote_cl = True
        lines.append(f"{k}: {v}".encode("latin-1"))
    if not wrote_cl:
        lines.append(b"Content-Length: " + str(len(body)).encode("ascii"))
    lines.append(b"Connection: close")
    return CRLF.join(lines) + CRLF + CRLF + body


class ProxyServer:
    """HTTP/1.1 forward proxy (absolute-URI form, no CONNECT).

    Submits every exchange to the ICAP gateway; `fail_policy` decides what
    happens when the gateway is unreachable: "closed" rejects with 502,
    "open" forwards uninspected and, when an emit_fallback is configured,
    still records the exchange flagged as uninspected.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 gateway_addr: tuple[str, int] | None = None,
                 fail_policy: str = "closed", max_body: int = MAX_BODY_SIZE,
                 timeout: float = 10.0, emit_fallback=None,
                 via_token: str = "websift"):
        if fail_policy not in ("open", "closed"):
            raise ValueError(f"unknown fail policy {fail_policy!r}")
        self.gateway_addr = gateway_addr
        self.fail_policy = fail_policy
        self.max_body = max_body
        self.timeout = timeout
        self.emit_fallback = emit_fallback
        self.via_token = via_token
        proxy = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                try:
                    proxy._handle(self.rfile, self.wfile)
                except (OSError, ProxyError):
                    pass

        self._server = _ThreadedServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "ProxyServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    # --- request handling

    def _send_error(self, wfile, status: int, reason: str, text: str) -> None:
        body = text.encode("utf-8")
        resp = HttpResponse(status, reason, [("Content-Type", "text/plain; charset=utf-8")])
        try:
            wfile.write(_client_response_bytes(resp, body))
        except OSError:
            pass

    def _handle(self, rfile, wfile) -> None:
        request_line = rfile.readline()
        if not request_line:
            return
        parts = request_line.rstrip(b"\r\n").split(b" ")
        if len(parts) != 3:
            self._send_error(wfile, 400, "Bad Request", "malformed request line")
            return
        method = parts[0].decode("latin-1")
        target = parts[1].decode("latin-1")
        if method == "CONNECT":
            self._send_error(wfile, 405, "Method Not Allowed",
                             "CONNECT tunneling is not supported")
            return
        if "://" not in target:
            self._send_error(wfile, 400, "Bad Request",
                             "proxy requires absolute-URI request targets")
            return
        headers = _read_http_headers(rfile, len(request_line))
        request = HttpRequest(method, target, headers)

        cl = request.header("Content-Length")
        request_body = b""
        if cl and cl.isdigit() and int(cl) > 0:
            request_body, _ = _read_sized(rfile, int(cl), self.max_body)

        started_at = int(time.time() * 1000)
        agent_id = request.header("X-Websift-Agent") or ""
        seeder = request.header("X-Websift-Seeder") or "benign"
        if seeder not in SEEDER_TAGS:
            seeder = "benign"
        exchange_id = uuid.uuid4().hex
        markers: dict[str, str] = {}
        inspected = True

        # client-side inspection
        if self.gateway_addr is not None:
            try:
                icap_transact(self.gateway_addr,
                              build_reqmod(request, request_body, exchange_id=exchange_id),
                              self.timeout)
            except (OSError, IcapParseError, ConnectionError):
                if self.fail_policy == "closed":
                    self._send_error(wfile, 502, "Bad Gateway",
                                     "inspection gateway unreachable (fail-closed)")
                    return
                inspected = False
                markers["wire.uninspected"] = "true"

        # origin fetch
        try:
            response, entity, truncated, peer_ip = _fetch_upstream(
                request, request_body, self.timeout, self.max_body, self.via_token)
            if peer_ip:
                markers["wire.upstream_ip"] = peer_ip
            if truncated:
                markers["wire.truncated"] = "true"
                response.headers = [(k, v) for k, v in response.headers
                                    if k.lower() != "content-length"]
                response.headers.append(("Content-Length", str(len(entity))))
        except (OSError, ProxyError) as exc:
            text = f"upstream fetch failed: {exc}".encode("utf-8")
            response = HttpResponse(502, "Bad Gateway",
                                    [("Content-Type", "text/plain; charset=utf-8"),
                                     ("Content-Length", str(len(text)))])
            entity = text
            markers["wire.fetch_error"] = str(exc) or type(exc).__name__

        exchange = HttpExchange(request=request, response=response, body=entity,
                                started_at=started_at, agent_id=agent_id,
                                seeder_tag=seeder)

        client_body = entity
        client_response = response
        if self.gateway_addr is not None and inspected:
            try:
                icap_resp = icap_transact(
                    self.gateway_addr,
                    encapsulate(exchange, exchange_id=exchange_id, markers=markers),
                    self.timeout)
                if icap_resp.status == 200 and icap_resp.section("res-hdr") is not None:
                    client_response = _parse_http_response_head(icap_resp.section("res-hdr"))
                    client_body = icap_resp.section("res-body") or b""
            except (OSError, IcapParseError, ConnectionError, ValueError):
                if self.fail_policy == "closed":
                    self._send_error(wfile, 502, "Bad Gateway",
                                     "inspection gateway unreachable (fail-closed)")
                    return
                inspected = False
                markers["wire.uninspected"] = "true"

        if not inspected and self.emit_fallback is not None:
            try:
                self.emit_fallback(EmittedExchange(exchange, markers, None,
                                                   request_body or None))
            except Exception:
                pass

        try:
            wfile.write(_client_response_bytes(client_response, client_body))
        except OSError:
            pass
