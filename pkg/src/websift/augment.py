"""Record augmentation from local fixtures: GeoIP ranges and WhoIs windows.

Both databases are tiny CSV fixtures loaded fully into memory; lookups
are read-only and safe to share across threads.  Augmentation is always
optional: a record without AugmentInfo flows through every later stage.
"""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import ipaddress
from dataclasses import dataclass
from importlib import resources

DEFAULT_SUFFIX_RESOURCE = "public_suffixes.txt"


class GeoIpFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


class WhoIsFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


@dataclass
class AugmentInfo:
    country: str | None = None
    city: str | None = None
    registered_on: dt.date | None = None
    expires_on: dt.date | None = None
    registration_days: int | None = None

    def validate(self) -> None:
        if self.registered_on is not None and self.expires_on is not None:
            days = (self.expires_on - self.registered_on).days
            if days < 0:
                raise ValueError("registration window ends before it starts")
            if self.registration_days is not None and self.registration_days != days:
                raise ValueError("registration_days disagrees with the window")

    def to_doc(self) -> dict:
        return {
            "country": self.country,
            "city": self.city,
            "registered_on": self.registered_on.isoformat() if self.registered_on else None,
            "expires_on": self.expires_on.isoformat() if self.expires_on else None,
            "registration_days": self.registration_days,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "AugmentInfo":
        reg = doc.get("registered_on")
        exp = doc.get("expires_on")
        return cls(
            country=doc.get("country"),
            city=doc.get("city"),
            registered_on=dt.date.fromisoformat(reg) if reg else None,
            expires_on=dt.date.fromisoformat(exp) if exp else None,
            registration_days=doc.get("registration_days"),
        )


# ---------------------------------------------------------------------------
# GeoIP

class GeoIpDb:
    """Sorted non-overlapping IPv4 ranges with inclusive ends."""

    def __init__(self, ranges: list[tuple[int, int, str, str]]):
        ranges = sorted(ranges)
        for (s1, e1, *_), (s2, _, *_) in zip(ranges, ranges[1:]):
            if s2 <= e1:
                raise ValueError(f"overlapping GeoIP ranges at {s2}")
        for start, end, *_ in ranges:
            if end < start:
                raise ValueError(f"inverted GeoIP range {start}..{end}")
        self._starts = [r[0] for r in ranges]
        self._ranges = ranges

    def __len__(self) -> int:
        return len(self._ranges)

    @classmethod
    def from_file(cls, path) -> "GeoIpDb":
        ranges = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                if len(row) != 4:
                    raise GeoIpFormatError("expected start_ip,end_ip,country,city", lineno)
                try:
                    start = int(ipaddress.IPv4Address(row[0].strip()))
                    end = int(ipaddress.IPv4Address(row[1].strip()))
                except (ipaddress.AddressValueError, ValueError):
                    raise GeoIpFormatError(f"bad IPv4 address in {row!r}", lineno)
                ranges.append((start, end, row[2].strip(), row[3].strip()))
        return cls(ranges)

    def lookup(self, ip_int: int) -> tuple[str, str] | None:
        idx = bisect.bisect_right(self._starts, ip_int) - 1
        if idx < 0:
            return None
        start, end, country, city = self._ranges[idx]
        if start <= ip_int <= end:
            return country, city
        return None


def geoip_lookup(ip: str, db: GeoIpDb) -> tuple[str, str] | None:
    """Country/city for an IPv4 address; IPv6 yields none by design."""
    try:
        addr = ipaddress.ip_address(ip.strip())
    except ValueError as exc:
        raise ValueError(f"malformed IP address {ip!r}") from exc
    if addr.version != 4:
        return None
    return db.lookup(int(addr))


# ---------------------------------------------------------------------------
# WhoIs

def _load_suffixes(path=None) -> frozenset[str]:
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = (resources.files("websift") / "data" /
                DEFAULT_SUFFIX_RESOURCE).read_text("utf-8")
    out = set()
    for line in text.splitlines():
        line = line.strip().lower()
        if line and not line.startswith("#"):
            out.add(line.lstrip("."))
    return frozenset(out)


def registrable_domain(host: str, suffixes: frozenset[str] | None = None) -> str | None:
    """Reduce a host to its registrable domain (suffix plus one label)."""
    if suffixes is None:
        suffixes = _load_suffixes()
    host = host.strip(".").lower()
    if not host or "." not in host:
        return None
    labels = host.split(".")
    # longest matching public suffix wins
    for i in range(1, len(labels)):
        if ".".join(labels[i:]) in suffixes:
            return ".".join(labels[i - 1:])
    if labels[-1] in suffixes and len(labels) >= 2:
        return ".".join(labels[-2:])
    return None


class WhoIsDb:
    """Registrable domain -> (registered_on, expires_on)."""

    def __init__(self, entries: dict[str, tuple[dt.date, dt.date]],
                 suffixes: frozenset[str] | None = None):
        self._entries = {k.lower(): v for k, v in entries.items()}
        self._suffixes = suffixes if suffixes is not None else _load_suffixes()

    def __len__(self) -> int:
        return len(self._entries)

    @classmethod
    def from_file(cls, path, suffix_path=None) -> "WhoIsDb":
        entries: dict[str, tuple[dt.date, dt.date]] = {}
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                if len(row) != 3:
                    raise WhoIsFormatError("expected domain,registered_on,expires_on", lineno)
                try:
                    registered = dt.date.fromisoformat(row[1].strip())
                    expires = dt.date.fromisoformat(row[2].strip())
                except ValueError:
                    raise WhoIsFormatError(f"bad ISO date in {row!r}", lineno)
                entries[row[0].strip().lower()] = (registered, expires)
        suffixes = _load_suffixes(suffix_path) if suffix_path else None
        return cls(entries, suffixes)

    def lookup(self, domain: str) -> tuple[dt.date, dt.date] | None:
        reduced = registrable_domain(domain, self._suffixes)
        if reduced is None:
            return None
        return self._entries.get(reduced)


def whois_lookup(domain: str, db: WhoIsDb) -> AugmentInfo | None:
    """Registration window for the registrable suffix of a host."""
    window = db.lookup(domain)
    if window is None:
        return None
    registered, expires = window
    return AugmentInfo(
        registered_on=registered,
        expires_on=expires,
        registration_days=(expires - registered).days,
    )


def augment_exchange(host: str, upstream_ip: str | None,
                     geodb: GeoIpDb | None, whoisdb: WhoIsDb | None) -> AugmentInfo | None:
    """Combine both fixture lookups; none when neither source knows anything."""
    info = AugmentInfo()
    hit = False
    if geodb is not None and upstream_ip:
        try:
            located = geoip_lookup(upstream_ip, geodb)
        except ValueError:
            located = None
        if located is not None:
            info.country, info.city = located
            hit = True
    if whoisdb is not None and host:
        windowed = whois_lookup(host, whoisdb)
        if windowed is not None:
            info.registered_on = windowed.registered_on
            info.expires_on = windowed.expires_on
            info.registration_days = windowed.registration_days
            hit = True
    return info if hit else None
