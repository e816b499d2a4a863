"""Deterministic synthetic web: site generation and an instrumented server.

A site spec is a JSON document listing pages with links, optional login
forms, optional gzip content coding, and a kind of "benign" or
"malicious".  Malicious pages are built from templates carrying eval
chains, long high-entropy strings, hidden iframes, onload handlers and a
fixed signature marker so every labeling stage has something to find.
The server logs each request it handles, which lets tests assert that
all traffic arrived through the proxy and that stored record counts
match reality.
"""

from __future__ import annotations

import base64
import gzip as gzip_mod
import json
import random
import threading
from dataclasses import dataclass, field
from hashlib import sha256
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

SIGNATURE_MARKER = b"WS-SIG-ALPHA-7f3e"
SIGNATURE_NAME = "Test.Sig.Alpha"
PAGE_KINDS = ("benign", "malicious")

_WORDS = ("maple", "harbor", "lantern", "copper", "meadow", "drift", "quarry",
          "ember", "willow", "summit", "cedar", "hollow", "prairie", "garnet")


class SiteSpecError(ValueError):
    pass


@dataclass
class PageSpec:
    path: str
    kind: str = "benign"
    links: list[str] = field(default_factory=list)
    login_form: bool = False
    gzip: bool = False
    body: str | None = None
    title: str = ""


def signature_line() -> str:
    """Signature-file line matching the marker embedded in malicious pages."""
    return f"{SIGNATURE_NAME}:{SIGNATURE_MARKER.hex()}"


# ---------------------------------------------------------------------------
# site generation

def _noise_string(rng: random.Random, length: int = 66) -> str:
    raw = bytes(rng.randrange(256) for _ in range(length))
    return base64.b64encode(raw).decode("ascii")[:length]


def _benign_body(page: PageSpec, rng: random.Random) -> str:
    paragraphs = []
    for _ in range(rng.randrange(2, 5)):
        words = " ".join(rng.choice(_WORDS) for _ in range(rng.randrange(8, 20)))
        paragraphs.append(f"<p>{words}.</p>")
    links = "\n".join(f'<a href="{href}">visit {href}</a>' for href in page.links)
    form = ""
    if page.login_form:
        form = (
            '<form action="/login" method="post">\n'
            '<input type="text" name="user">\n'
            '<input type="password" name="pass">\n'
            '<input type="submit" value="Sign in">\n'
            "</form>"
        )
    return (
        "<html><head><title>{title}</title></head><body>\n"
        "<h1>{title}</h1>\n{paragraphs}\n{form}\n{links}\n"
        "</body></html>"
    ).format(title=page.title or page.path, paragraphs="\n".join(paragraphs),
             form=form, links=links)


def _malicious_body(page: PageSpec, rng: random.Random) -> str:
    blob_a = _noise_string(rng)
    blob_b = _noise_string(rng)
    drop_host = f"drop-{rng.randrange(1000):03d}.invalid"
    links = "\n".join(f'<a href="{href}">more {href}</a>' for href in page.links)
    return (
        "<html><head><title>{title}</title></head>\n"
        '<body onload="boot()">\n'
        "<script>\n"
        'var p0 = "{blob_a}";\n'
        'var p1 = "{blob_b}";\n'
        "function boot() {{ var s = unescape(p0); eval(s); }}\n"
        "eval(p1);\n"
        'document.write("<iframe src=\'http://{drop}/x\'></iframe>");\n'
        "</script>\n"
        '<iframe src="/banner" width="1" height="1"></iframe>\n'
        '<span data-k="{marker}"></span>\n'
        "{links}\n"
        "</body></html>"
    ).format(title=page.title or page.path, blob_a=blob_a, blob_b=blob_b,
             drop=drop_host, marker=SIGNATURE_MARKER.decode("ascii"), links=links)


def render_page(page: PageSpec, seed: int = 0) -> bytes:
    """Deterministic page bytes (pre content-coding)."""
    if page.body is not None:
        return page.body.encode("utf-8")
    rng = random.Random(f"{seed}:{page.path}:{page.kind}")
    if page.kind == "malicious":
        return _malicious_body(page, rng).encode("utf-8")
    return _benign_body(page, rng).encode("utf-8")


def generate_site(n_benign: int, n_malicious: int, seed: int = 1) -> dict:
    """Site spec with n_benign + n_malicious interlinked pages."""
    rng = random.Random(seed)
    paths = [f"/b{i:03d}" for i in range(n_benign)] + \
            [f"/m{i:03d}" for i in range(n_malicious)]
    pages = []
    for idx, path in enumerate(paths):
        n_links = rng.randrange(1, 4) if len(paths) > 1 else 0
        links = []
        for _ in range(n_links):
            target = paths[rng.randrange(len(paths))]
            if target != path and target not in links:
                links.append(target)
        pages.append({
            "path": path,
            "kind": "malicious" if path.startswith("/m") else "benign",
            "links": links,
            "login_form": idx == 0,
            "gzip": rng.random() < 0.25,
        })
    return {"seed": seed, "pages": pages}


def load_site_spec(doc: dict) -> dict[str, PageSpec]:
    if not isinstance(doc, dict) or not isinstance(doc.get("pages"), list):
        raise SiteSpecError("site spec must be an object with a 'pages' list")
    pages: dict[str, PageSpec] = {}
    for i, entry in enumerate(doc["pages"]):
        if not isinstance(entry, dict) or not isinstance(entry.get("path"), str):
            raise SiteSpecError(f"page {i} needs a string 'path'")
        path = entry["path"]
        if not path.startswith("/"):
            raise SiteSpecError(f"page path {path!r} must start with '/'")
        if path in pages:
            raise SiteSpecError(f"duplicate page path {path!r}")
        kind = entry.get("kind", "benign")
        if kind not in PAGE_KINDS:
            raise SiteSpecError(f"page {path!r} has unknown kind {kind!r}")
        links = entry.get("links", [])
        if not isinstance(links, list) or any(not isinstance(h, str) for h in links):
            raise SiteSpecError(f"page {path!r} links must be strings")
        pages[path] = PageSpec(
            path=path,
            kind=kind,
            links=list(links),
            login_form=bool(entry.get("login_form", False)),
            gzip=bool(entry.get("gzip", False)),
            body=entry.get("body"),
            title=entry.get("title", ""),
        )
    return pages


def load_site_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SiteSpecError(f"site spec is not valid JSON: {exc}") from None


def engine_fixture_for(doc: dict, detections: int = 12) -> dict[str, list[str]]:
    """Engine fixture mapping each malicious page's body digest to alerts.

    Keyed by SHA-256 of the decoded body, which is what the engine set
    hashes on submit; `detections` engines flag each malicious page so
    ground truth lands on the malicious side of the threshold.
    """
    from .labels import ENGINE_NAMES

    seed = doc.get("seed", 0)
    fixture: dict[str, list[str]] = {}
    for path, page in load_site_spec(doc).items():
        if page.kind != "malicious":
            continue
        digest = sha256(render_page(page, seed)).hexdigest()
        start = int(digest[:4], 16) % len(ENGINE_NAMES)
        fixture[digest] = [ENGINE_NAMES[(start + i) % len(ENGINE_NAMES)]
                           for i in range(detections)]
    return fixture


# ---------------------------------------------------------------------------
# instrumented server

class SynthWebServer:
    """Serves a site spec and ledgers every request it handles."""

    def __init__(self, doc: dict, host: str = "127.0.0.1", port: int = 0):
        self.pages = load_site_spec(doc)
        self.seed = doc.get("seed", 0)
        self.requests: list[dict] = []
        self._ledger_lock = threading.Lock()
        site = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _ledger(self, form=None):
                with site._ledger_lock:
                    site.requests.append({
                        "method": self.command,
                        "path": self.path,
                        "via": self.headers.get("Via"),
                        "agent": self.headers.get("X-Websift-Agent"),
                        "form": form,
                    })

            def _send(self, status: int, body: bytes, content_encoding: str | None = None):
                self.send_response(status)
                self.send_header("Content-Type", "text/html; charset=utf-8")
                if content_encoding:
                    self.send_header("Content-Encoding", content_encoding)
                self.send_header("Content-Length", str(len(body)))
                self.send_header("Connection", "close")
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                self._ledger()
                path = urlsplit(self.path).path
                page = site.pages.get(path)
                if page is None:
                    self._send(404, b"<html><body>not found</body></html>")
                    return
                body = render_page(page, site.seed)
                if page.gzip:
                    self._send(200, gzip_mod.compress(body, mtime=0), "gzip")
                else:
                    self._send(200, body)

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                form = {k: v[0] for k, v in
                        parse_qs(raw.decode("utf-8", "replace")).items()}
                self._ledger(form=form)
                self._send(200, b"<html><body><h1>welcome</h1></body></html>")

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def base_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def request_count(self) -> int:
        with self._ledger_lock:
            return len(self.requests)

    def ledger(self) -> list[dict]:
        with self._ledger_lock:
            return [dict(r) for r in self.requests]

    def start(self) -> "SynthWebServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
