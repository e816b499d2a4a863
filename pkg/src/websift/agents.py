"""Headless user agents: seed consumption, login-then-interact, supervision.

Agents fetch seed URLs through the forward proxy, parse the returned
HTML with the tolerant parser, and execute a deterministic action plan:
one login first when a password form exists, then links, forms and
buttons in document order until the interaction budget runs out.  Only
same-origin links are followed, one level deep from the seed.  A
supervisor restarts agents whose newest stored record is older than a
threshold.
"""

from __future__ import annotations

import csv
import socket
from dataclasses import dataclass, field
from urllib.parse import urlencode, urljoin, urlsplit

from .features import FormSpec, HtmlDoc, parse_html

SEED_FOCUSES = ("benign", "malware", "phishing")
FALLBACK_CREDENTIALS = ("testuser", "testpass")
DEFAULT_VIEWPORT = (1366, 768)
DEFAULT_USER_AGENT = "Mozilla/5.0 (X11; Linux x86_64) websift-agent/0.1"
HEARTBEAT_THRESHOLD = 600.0

AGENT_HEADER = "X-Websift-Agent"
SEEDER_HEADER = "X-Websift-Seeder"
VIEWPORT_HEADER = "X-Websift-Viewport"


class AgentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SeedEntry:
    url: str
    focus: str


@dataclass
class AgentConfig:
    agent_id: str
    focus: str = "benign"
    interaction_budget: int = 10
    viewport: tuple[int, int] = DEFAULT_VIEWPORT
    user_agent_string: str = DEFAULT_USER_AGENT
    credentials_path: str | None = None

    def __post_init__(self):
        if self.interaction_budget < 0:
            raise AgentConfigError("interaction_budget must be >= 0")
        if self.focus not in SEED_FOCUSES:
            raise AgentConfigError(f"unknown seed focus {self.focus!r}")


@dataclass
class Action:
    kind: str  # login | follow | submit | click
    target: str
    fields: dict[str, str] = field(default_factory=dict)


@dataclass
class ActionPlan:
    actions: list[Action] = field(default_factory=list)
    stop_reason: str = "depleted"  # budget | depleted


@dataclass
class VisitSummary:
    seed: str
    requests_made: int = 0
    actions_executed: int = 0
    stop_reason: str = "depleted"
    errors: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# seeders

class Seeder:
    """Round-robin seed source for one focus; position survives calls."""

    def __init__(self, urls: list[str], focus: str):
        if focus not in SEED_FOCUSES:
            raise AgentConfigError(f"unknown seed focus {focus!r}")
        if not urls:
            raise AgentConfigError(f"seed list for focus {focus!r} is empty")
        self.focus = focus
        self._urls = list(urls)
        self._position = 0

    def __len__(self) -> int:
        return len(self._urls)

    @classmethod
    def from_file(cls, path, focus: str) -> "Seeder":
        urls = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    urls.append(line)
        return cls(urls, focus)

    def next_seed(self) -> SeedEntry:
        url = self._urls[self._position % len(self._urls)]
        self._position += 1
        return SeedEntry(url=url, focus=self.focus)


def load_credentials(path) -> dict[str, tuple[str, str]]:
    """CSV host,user,password -> host-keyed credential map."""
    creds: dict[str, tuple[str, str]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 3:
                raise AgentConfigError(f"credentials row needs host,user,password: {row!r}")
            creds[row[0].strip().lower()] = (row[1].strip(), row[2].strip())
    return creds


# ---------------------------------------------------------------------------
# interaction planning

def _form_fields(form: FormSpec, user: str, password: str) -> dict[str, str]:
    fields = {}
    for name, ftype in form.fields:
        if not name:
            continue
        if ftype == "password":
            fields[name] = password
        elif ftype in ("submit", "hidden", "checkbox", "radio", "button"):
            continue
        else:
            fields[name] = user
    return fields


def plan_interaction(page: HtmlDoc, cfg: AgentConfig,
                     creds: dict[str, tuple[str, str]] | None,
                     base_url: str) -> ActionPlan:
    """Login first when possible, then document-order interactables.

    The login form is consumed by the login action and not submitted a
    second time.  Cross-origin links never enter the plan; the budget
    counts every action including the login.
    """
    host = (urlsplit(base_url).hostname or "").lower()
    user, password = (creds or {}).get(host, FALLBACK_CREDENTIALS)
    base_origin = _origin(base_url)

    login_form = None
    for kind, payload in page.interactables:
        if kind == "form" and payload.has_password:
            login_form = payload
            break

    queue: list[Action] = []
    if login_form is not None:
        queue.append(Action("login", urljoin(base_url, login_form.action or ""),
                            _form_fields(login_form, user, password)))
    for kind, payload in page.interactables:
        if kind == "link":
            target = urljoin(base_url, payload)
            if _origin(target) == base_origin:
                queue.append(Action("follow", target))
        elif kind == "form":
            if payload is login_form:
                continue
            queue.append(Action("submit", urljoin(base_url, payload.action or ""),
                                _form_fields(payload, user, password)))
        elif kind == "button":
            queue.append(Action("click", urljoin(base_url, payload)))

    if len(queue) > cfg.interaction_budget:
        return ActionPlan(queue[:cfg.interaction_budget], "budget")
    return ActionPlan(queue, "depleted")


def _origin(url: str) -> tuple[str, str, int]:
    parts = urlsplit(url)
    port = parts.port or (443 if parts.scheme == "https" else 80)
    return (parts.scheme.lower(), (parts.hostname or "").lower(), port)


# ---------------------------------------------------------------------------
# proxied HTTP client

def proxy_request(proxy_addr: tuple[str, int], method: str, url: str,
                  headers: list[tuple[str, str]], body: bytes = b"",
                  timeout: float = 10.0) -> tuple[int, list[tuple[str, str]], bytes]:
    """One absolute-URI request through the forward proxy."""
    with socket.create_connection(proxy_addr, timeout=timeout) as sock:
        lines = [f"{method} {url} HTTP/1.1".encode("latin-1")]
        for k, v in headers:
            lines.append(f"{k}: {v}".encode("latin-1"))
        if body:
            lines.append(f"Content-Length: {len(body)}".encode("latin-1"))
        lines.append(b"Connection: close")
        sock.sendall(b"\r\n".join(lines) + b"\r\n\r\n" + body)

        rfile = sock.makefile("rb")
        status_line = rfile.readline()
        parts = status_line.rstrip(b"\r\n").split(b" ", 2)
        if len(parts) < 2 or not parts[1].isdigit():
            raise ConnectionError(f"bad proxy status line {status_line!r}")
        status = int(parts[1])
        resp_headers: list[tuple[str, str]] = []
        while True:
            line = rfile.readline()
            if not line:
                raise ConnectionError("proxy closed inside response headers")
            if line in (b"\r\n", b"\n"):
                break
            name, _, value = line.rstrip(b"\r\n").partition(b":")
            resp_headers.append((name.decode("latin-1").strip(),
                                 value.decode("latin-1").strip()))
        cl = next((v for k, v in resp_headers if k.lower() == "content-length"), None)
        if cl is not None and cl.isdigit():
            data = rfile.read(int(cl))
        else:
            data = rfile.read()
        return status, resp_headers, data


# ---------------------------------------------------------------------------
# the agent

def _is_html(headers: list[tuple[str, str]]) -> bool:
    ctype = next((v for k, v in headers if k.lower() == "content-type"), "")
    return "html" in ctype.lower() or not ctype


class Agent:
    def __init__(self, cfg: AgentConfig, proxy_addr: tuple[str, int],
                 creds: dict[str, tuple[str, str]] | None = None,
                 timeout: float = 10.0):
        self.cfg = cfg
        self.proxy_addr = proxy_addr
        self.creds = creds if creds is not None else (
            load_credentials(cfg.credentials_path) if cfg.credentials_path else {})
        self.timeout = timeout

    def _headers(self) -> list[tuple[str, str]]:
        w, h = self.cfg.viewport
        return [
            ("User-Agent", self.cfg.user_agent_string),
            (AGENT_HEADER, self.cfg.agent_id),
            (SEEDER_HEADER, self.cfg.focus),
            (VIEWPORT_HEADER, f"{w}x{h}"),
            ("Accept", "text/html,*/*"),
        ]

    def _request(self, method: str, url: str, body: bytes = b"",
                 extra_headers: list[tuple[str, str]] | None = None):
        headers = self._headers() + list(extra_headers or [])
        return proxy_request(self.proxy_addr, method, url, headers, body,
                             self.timeout)

    def visit(self, seed: SeedEntry) -> VisitSummary:
        summary = VisitSummary(seed=seed.url)
        try:
            status, headers, data = self._request("GET", seed.url)
        except (OSError, ConnectionError) as exc:
            summary.errors.append(f"seed fetch failed: {exc}")
            return summary
        summary.requests_made += 1
        if status != 200 or not _is_html(headers):
            return summary

        page = parse_html(data.decode("utf-8", "replace"))
        plan = plan_interaction(page, self.cfg, self.creds, seed.url)
        summary.stop_reason = plan.stop_reason
        for action in plan.actions:
            try:
                if action.kind == "follow":
                    self._request("GET", action.target)
                else:
                    payload = urlencode(action.fields).encode("ascii")
                    self._request(
                        "POST", action.target, payload,
                        [("Content-Type", "application/x-www-form-urlencoded")])
                summary.requests_made += 1
                summary.actions_executed += 1
            except (OSError, ConnectionError) as exc:
                summary.errors.append(f"{action.kind} {action.target}: {exc}")
        return summary

    def run(self, seeder: Seeder, seed_cap: int) -> list[VisitSummary]:
        return [self.visit(seeder.next_seed()) for _ in range(seed_cap)]


def run_agent(cfg: AgentConfig, proxy_addr: tuple[str, int], seeder: Seeder,
              seed_cap: int,
              creds: dict[str, tuple[str, str]] | None = None) -> list[VisitSummary]:
    return Agent(cfg, proxy_addr, creds).run(seeder, seed_cap)


# ---------------------------------------------------------------------------
# supervision

def supervise(heartbeats: dict[str, float], now: float,
              threshold: float = HEARTBEAT_THRESHOLD) -> list[str]:
    """Agent ids whose heartbeat is strictly older than the threshold.

    The heartbeat is the timestamp of the agent's newest stored record;
    agents with no records yet use their start time.
    """
    return sorted(agent_id for agent_id, beat in heartbeats.items()
                  if now - beat > threshold)


def heartbeat_from_store(store, agent_id: str, default: float) -> float:
    """Newest record timestamp (seconds) for an agent, else the default."""
    records = store.query([("exchange.agent_id", "eq", agent_id)])
    if not records:
        return default
    newest = max(r.exchange.started_at for r in records if r.exchange)
    return newest / 1000.0
