"""Capture pipeline: gateway emissions to stored, labeled, featured records.

A single worker thread owns all store writes (the committing owner);
the gateway and proxy push EmittedExchange objects onto a queue from
their connection threads.  Each emission becomes exactly one FlowRecord
with blobs, decoded content, features, fast labels, an optional scan
ticket and augmentation.  Label worker cycles run between capture
phases so ticket mutations stay on the same writer.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from urllib.parse import urlsplit

from . import contentprep
from .augment import GeoIpDb, WhoIsDb, augment_exchange
from .features import extract_features
from .flowstore import FlowRecord, FlowStore
from .labels import (
    FastVerdict,
    LabelSet,
    SignatureSet,
    SimulatedEngineSet,
    ThreatType,
    UrlBlacklist,
    UrlError,
    fast_verdict,
    fetch_worker_step,
    schedule_multiengine,
    submit_worker_step,
)
from .wire import EmittedExchange, IcapGateway, ProxyServer


@dataclass
class LabelSources:
    blacklist: UrlBlacklist | None = None
    signatures: SignatureSet | None = None
    engines: SimulatedEngineSet | None = None
    geoip: GeoIpDb | None = None
    whois: WhoIsDb | None = None


@dataclass
class RunSummary:
    records: int = 0
    blobs: int = 0
    tickets: dict[str, int] = field(default_factory=dict)
    refused: int = 0
    errors: int = 0
    agent_requests: int = 0

    def to_doc(self) -> dict:
        return {
            "records": self.records,
            "blobs": self.blobs,
            "tickets": dict(self.tickets),
            "refused": self.refused,
            "errors": self.errors,
            "agent_requests": self.agent_requests,
        }


def _decoded_view(exchange) -> tuple[bytes, list[str], str | None]:
    """(decoded bytes, applied codings, decode error text)."""
    try:
        decoded = contentprep.decode_body(exchange.body, exchange.response.headers)
    except contentprep.BodyDecodeError as exc:
        return exchange.body, [], str(exc)
    return decoded.data, decoded.applied_codings, None


def make_verdict_fn(sources: LabelSources):
    """Synchronous fast verdict for the gateway: blacklist + signatures."""
    def verdict_fn(exchange) -> FastVerdict:
        decoded, _, _ = _decoded_view(exchange)
        try:
            return fast_verdict(exchange.request.url, decoded,
                                sources.blacklist, sources.signatures)
        except UrlError:
            hits = sources.signatures.scan(decoded) if sources.signatures else []
            return FastVerdict(ThreatType.NONE, hits)
    return verdict_fn


def commit_emitted(store: FlowStore, emitted: EmittedExchange,
                   sources: LabelSources) -> FlowRecord:
    """Turn one gateway emission into one stored FlowRecord."""
    exchange = emitted.exchange
    extra = {k: v for k, v in emitted.markers.items()}

    body_sha1 = store.put_blob(exchange.body) if exchange.body else None
    decoded, applied, decode_error = _decoded_view(exchange)
    decoded_sha1 = None
    if exchange.body:
        decoded_sha1 = store.put_blob(decoded) if decoded != exchange.body else body_sha1
    if applied:
        extra["prep.codings"] = ",".join(applied)
    if decode_error:
        extra["prep.decode_error"] = decode_error

    if emitted.request_body:
        extra["wire.request_body_sha1"] = store.put_blob(emitted.request_body)

    verdict = emitted.verdict
    if verdict is None:
        try:
            verdict = fast_verdict(exchange.request.url, decoded,
                                   sources.blacklist, sources.signatures)
        except UrlError:
            # uncanonicalizable URL: the content side still gets scanned
            hits = sources.signatures.scan(decoded) if sources.signatures else []
            verdict = FastVerdict(ThreatType.NONE, hits)
    labels = LabelSet(
        blacklist=verdict.blacklist,
        signature_hits=list(verdict.signature_hits),
        scan_ticket=schedule_multiengine(verdict),
    )

    ctype = exchange.response.header("Content-Type") or ""
    features = extract_features(decoded, ctype)

    host = urlsplit(exchange.request.url).hostname or ""
    augment = augment_exchange(host, emitted.markers.get("wire.upstream_ip"),
                               sources.geoip, sources.whois)

    record = FlowRecord(
        exchange=exchange,
        body_sha1=body_sha1,
        decoded_sha1=decoded_sha1,
        labels=labels,
        augment=augment,
        features=features,
        extra=extra,
    )
    store.put_record(record)
    return record


def run_label_cycles(store: FlowStore, engines: SimulatedEngineSet,
                     max_cycles: int = 10000) -> dict[str, int]:
    """Alternate submit/fetch worker steps until the queues drain."""
    submitted = fetched = cycles = 0
    while cycles < max_cycles:
        cycles += 1
        s = submit_worker_step(store, engines)
        f = fetch_worker_step(store, engines)
        submitted += s
        fetched += f
        if s == 0 and f == 0:
            break
    return {"submitted": submitted, "fetched": fetched, "cycles": cycles}


class Pipeline:
    """Gateway + proxy + committing worker around one FlowStore."""

    def __init__(self, store: FlowStore, sources: LabelSources | None = None,
                 mode: str = "collect", fail_policy: str = "closed",
                 gateway_port: int = 0, proxy_port: int = 0,
                 host: str = "127.0.0.1"):
        self.store = store
        self.sources = sources or LabelSources()
        self._queue: queue.Queue = queue.Queue()
        self.errors: list[str] = []
        self.committed = 0
        self.gateway = IcapGateway(
            host=host, port=gateway_port, mode=mode,
            verdict_fn=make_verdict_fn(self.sources),
            emit=self._queue.put)
        self.proxy = ProxyServer(
            host=host, port=proxy_port, gateway_addr=None,
            fail_policy=fail_policy, emit_fallback=self._queue.put)
        self._worker: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def proxy_addr(self) -> tuple[str, int]:
        return self.proxy.address

    def start(self) -> "Pipeline":
        self.gateway.start()
        self.proxy.gateway_addr = self.gateway.address
        self.proxy.start()
        self._stop.clear()
        self._worker = threading.Thread(target=self._drain, daemon=True)
        self._worker.start()
        return self

    def _drain(self) -> None:
        while True:
            try:
                emitted = self._queue.get(timeout=0.05)
            except queue.Empty:
                if self._stop.is_set():
                    return
                continue
            try:
                commit_emitted(self.store, emitted, self.sources)
                self.committed += 1
            except Exception as exc:  # keep the owner alive; surface later
                self.errors.append(f"{type(exc).__name__}: {exc}")
            finally:
                self._queue.task_done()

    def flush(self) -> None:
        self._queue.join()
        self.store.flush()

    def stop_capture(self) -> None:
        """Stop accepting traffic, then drain what already arrived."""
        self.proxy.stop()
        self.gateway.stop()
        self.flush()
        self._stop.set()
        if self._worker is not None:
            self._worker.join(timeout=10)
            self._worker = None

    def run_labels(self) -> dict[str, int]:
        if self.sources.engines is None:
            return {"submitted": 0, "fetched": 0, "cycles": 0}
        return run_label_cycles(self.store, self.sources.engines)

    def summary(self) -> RunSummary:
        tickets: dict[str, int] = {}
        for record in self.store.records():
            ticket = record.labels.scan_ticket
            if ticket is not None:
                key = ticket.status.value
                tickets[key] = tickets.get(key, 0) + 1
        return RunSummary(
            records=self.store.record_count(),
            blobs=self.store.blob_count(),
            tickets=tickets,
            refused=len(self.gateway.refused),
            errors=len(self.errors),
        )


def partition_seeds(urls: list[str], n_agents: int,
                    seed_cap: int | None = None) -> list[list[str]]:
    """Deterministic round-robin split: agent i takes urls[i::n]."""
    if seed_cap is not None:
        urls = urls[:seed_cap]
    return [urls[i::n_agents] for i in range(n_agents)]


def run_crawl(store: FlowStore, sources: LabelSources, seed_urls: list[str],
              focus: str = "benign", n_agents: int = 2, budget: int = 10,
              seed_cap: int | None = None, mode: str = "collect",
              fail_policy: str = "closed",
              creds: dict[str, tuple[str, str]] | None = None) -> RunSummary:
    """Capture run: agents over seeds, then label cycles, then summary."""
    from .agents import Agent, AgentConfig, Seeder

    pipeline = Pipeline(store, sources, mode=mode, fail_policy=fail_policy)
    pipeline.start()
    summaries = []
    try:
        slices = partition_seeds(seed_urls, max(1, n_agents), seed_cap)
        threads = []
        results: list[list] = [[] for _ in slices]

        def drive(idx: int, urls: list[str]) -> None:
            if not urls:
                return
            cfg = AgentConfig(agent_id=f"agent-{idx + 1:02d}", focus=focus,
                              interaction_budget=budget)
            agent = Agent(cfg, pipeline.proxy_addr, creds or {})
            results[idx] = agent.run(Seeder(urls, focus), len(urls))

        for idx, urls in enumerate(slices):
            t = threading.Thread(target=drive, args=(idx, urls), daemon=True)
            threads.append(t)
            t.start()
        for t in threads:
            t.join()
        for batch in results:
            summaries.extend(batch)
    finally:
        pipeline.stop_capture()

    pipeline.run_labels()
    summary = pipeline.summary()
    summary.agent_requests = sum(v.requests_made for v in summaries)
    return summary
