"""Static 58-feature extraction from decoded document bodies.

Every rule is written up in docs/feature_ledger.md; the ledger hash below
is embedded in trained models so that a model can refuse vectors produced
under a different ledger revision.
"""

from __future__ import annotations

import hashlib
import re
from typing import Iterable, Mapping

from .entropy import shannon_entropy, shellcode_probability
from .htmlparse import HtmlDoc, parse_html
from .jsparse import AstCounts, JsAst, parse_js

LEDGER_VERSION = "1"

FEATURE_ORDER: tuple[str, ...] = (
    "NumclearAttributes", "Filesize", "crypt", "NumWords", "ishtml",
    "NumLongStrings", "TotalEntropy", "NumReassignmentOfSpecialObject",
    "onerror", "isjs", "NumActiveXObject", "MaxStringEntropy", "NumKeywords",
    "NumfireEvent", "NumreplaceNode", "NumBracketLookups",
    "ShellcodeProbability", "AvgStringLength", "EntropyDensity",
    "NumattachEvent", "containsjstags", "TotalStringEntropy", "onunload",
    "script", "NumHTMLNodes", "MaxStrLen", "IP_address", "NumBracketCalls",
    "NuminsertAdjacentElement", "NumNodes", "ishtmlwithjse4x", "NumStrings",
    "evil", "NumiframeString", "NumaddEventListener", "NumsetInterval",
    "scriptTagDataURLCount", "htmlEventCount", "AvgLinesize", "shell",
    "NumPackerFunctions", "parsingerror", "ishtmlwithjs", "onload",
    "NumsetTimeout", "TotalStringLength", "embed", "Numeval", "object",
    "frame", "spray", "NumLongVarOrFunNames", "iframe", "isjse4x",
    "NumdispatchEvent", "form", "NumFunctionCalls", "onbeforeload",
)

FLOAT_FEATURES = frozenset(
    ["TotalEntropy", "MaxStringEntropy", "TotalStringEntropy",
     "EntropyDensity", "ShellcodeProbability", "AvgStringLength", "AvgLinesize"]
)
BOOL_FEATURES = frozenset(
    ["ishtml", "isjs", "ishtmlwithjs", "ishtmlwithjse4x", "isjse4x", "parsingerror"]
)
ENTROPY_FEATURES = frozenset(["TotalEntropy", "MaxStringEntropy", "TotalStringEntropy"])

LONG_STRING_LEN = 40

# feature name -> token counted case-insensitively over the whole raw text
KEYWORD_FAMILY = (
    ("Numeval", "eval"), ("script", "script"), ("iframe", "iframe"),
    ("form", "form"), ("embed", "embed"), ("object", "object"),
    ("frame", "frame"), ("shell", "shell"), ("spray", "spray"),
    ("crypt", "crypt"), ("evil", "evil"),
)

EVENT_FEATURES = ("onload", "onerror", "onunload", "onbeforeload")

# feature name -> function name counted from direct call expressions
NAMED_CALL_FEATURES = (
    ("NumclearAttributes", "clearAttributes"),
    ("NumfireEvent", "fireEvent"),
    ("NumreplaceNode", "replaceNode"),
    ("NuminsertAdjacentElement", "insertAdjacentElement"),
    ("NumaddEventListener", "addEventListener"),
    ("NumsetInterval", "setInterval"),
    ("NumsetTimeout", "setTimeout"),
    ("NumdispatchEvent", "dispatchEvent"),
    ("NumattachEvent", "attachEvent"),
)

_IP_RE = re.compile(r"(?<![0-9.])(?:\d{1,3}\.){3}\d{1,3}(?![0-9.])")

# a document is treated as HTML when it contains at least one tag with a
# recognized name; unknown tags alone do not flip the flag
_HTML_HINT_RE = re.compile(
    r"<\s*(?:!doctype\b|html\b|head\b|body\b|title\b|meta\b|link\b|script\b|"
    r"style\b|div\b|span\b|p\b|a\b|img\b|br\b|hr\b|iframe\b|frame\b|frameset\b|"
    r"form\b|input\b|button\b|table\b|tr\b|td\b|th\b|ul\b|ol\b|li\b|h[1-6]\b|"
    r"em\b|b\b|i\b|strong\b|pre\b|code\b|object\b|embed\b|applet\b|center\b|font\b)",
    re.IGNORECASE,
)

# cheap signal that plain text might be JavaScript worth parsing
_JS_HINT_RE = re.compile(
    r"[;{}()=\[\]]|\b(?:var|let|const|function|return|eval|if|else|for|while|"
    r"new|typeof|document|window)\b"
)

_WORD_PATTERNS: dict[str, re.Pattern[str]] = {}


def _count_word(text: str, word: str) -> int:
    pat = _WORD_PATTERNS.get(word)
    if pat is None:
        pat = re.compile(
            r"(?<![0-9A-Za-z_$])" + re.escape(word) + r"(?![0-9A-Za-z_$])",
            re.IGNORECASE,
        )
        _WORD_PATTERNS[word] = pat
    return len(pat.findall(text))


def ledger_hash() -> str:
    """SHA-256 over the ledger version and the feature column order."""
    payload = "websift-feature-ledger v" + LEDGER_VERSION + "\n" + "\n".join(FEATURE_ORDER)
    return hashlib.sha256(payload.encode("ascii")).hexdigest()


class FeatureVector:
    """Immutable mapping of the 58 feature names to numeric values."""

    __slots__ = ("_values",)

    def __init__(self, values: Mapping[str, float]):
        got = set(values)
        want = set(FEATURE_ORDER)
        if got != want:
            missing = sorted(want - got)
            extra = sorted(got - want)
            raise ValueError(f"feature set mismatch: missing={missing} extra={extra}")
        checked: dict[str, float] = {}
        for name in FEATURE_ORDER:
            v = values[name]
            if isinstance(v, bool):
                v = int(v)
            if not isinstance(v, (int, float)):
                raise ValueError(f"{name}: non-numeric value {v!r}")
            if v < 0:
                raise ValueError(f"{name}: negative value {v!r}")
            if name in BOOL_FEATURES and v not in (0, 1):
                raise ValueError(f"{name}: boolean feature outside {{0,1}}: {v!r}")
            if name in ENTROPY_FEATURES and v > 8.0:
                raise ValueError(f"{name}: entropy above 8 bits/byte: {v!r}")
            if name == "ShellcodeProbability" and v > 1.0:
                raise ValueError(f"{name}: probability above 1: {v!r}")
            if name not in FLOAT_FEATURES and int(v) != v:
                raise ValueError(f"{name}: expected integral value, got {v!r}")
            checked[name] = int(v) if name not in FLOAT_FEATURES else float(v)
        self._values = checked

    def __getitem__(self, name: str) -> float:
        return self._values[name]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FeatureVector) and self._values == other._values

    def __repr__(self) -> str:
        return f"FeatureVector({self._values!r})"

    def as_row(self) -> list[float]:
        """Values in ledger column order."""
        return [self._values[name] for name in FEATURE_ORDER]

    def as_dict(self) -> dict[str, float]:
        return dict(self._values)

    def to_doc(self) -> dict:
        return {"ledger": LEDGER_VERSION, "values": self.as_row()}

    @classmethod
    def from_doc(cls, doc: Mapping) -> "FeatureVector":
        if doc.get("ledger") != LEDGER_VERSION:
            raise ValueError(f"feature ledger mismatch: {doc.get('ledger')!r}")
        values = doc["values"]
        if len(values) != len(FEATURE_ORDER):
            raise ValueError(f"expected {len(FEATURE_ORDER)} values, got {len(values)}")
        return cls(dict(zip(FEATURE_ORDER, values)))

    @classmethod
    def from_row(cls, row: Iterable[float]) -> "FeatureVector":
        values = list(row)
        if len(values) != len(FEATURE_ORDER):
            raise ValueError(f"expected {len(FEATURE_ORDER)} values, got {len(values)}")
        return cls(dict(zip(FEATURE_ORDER, values)))


def _declared_is_js(declared_type: str) -> bool:
    t = declared_type.lower()
    return "javascript" in t or "ecmascript" in t


def extract_features(data: bytes, declared_type: str = "") -> FeatureVector:
    """Compute the 58-feature vector for a decoded document body.

    Total on arbitrary byte input: undecodable bytes are replaced, HTML is
    parsed tolerantly, and JavaScript grammar failures surface only through
    the parsingerror feature.
    """
    text = data.decode("utf-8", "replace")
    f: dict[str, float] = dict.fromkeys(FEATURE_ORDER, 0)

    f["Filesize"] = len(data)
    f["TotalEntropy"] = shannon_entropy(data)
    f["EntropyDensity"] = f["TotalEntropy"] / 8.0
    f["NumWords"] = len(text.split())
    lines = text.split("\n")
    f["AvgLinesize"] = (sum(len(ln) for ln in lines) / len(lines)) if text else 0.0
    for feat, word in KEYWORD_FAMILY:
        f[feat] = _count_word(text, word)
    f["IP_address"] = len(_IP_RE.findall(text))

    doc: HtmlDoc | None = None
    js_sources: list[str] = []
    attempted_js = False
    if _HTML_HINT_RE.search(text):
        doc = parse_html(text)
        f["ishtml"] = 1
        f["NumHTMLNodes"] = doc.node_count
        f["containsjstags"] = doc.script_tag_count
        f["scriptTagDataURLCount"] = doc.data_url_script_count
        f["htmlEventCount"] = doc.event_total()
        js_sources = [s for s in doc.script_sources if s.strip()]
        attempted_js = bool(js_sources)
    else:
        declared_js = _declared_is_js(declared_type)
        if text.strip() and (declared_js or _JS_HINT_RE.search(text)):
            js_sources = [text]
            attempted_js = True

    asts: list[JsAst] = [parse_js(src) for src in js_sources]
    all_ok = all(a.parse_ok for a in asts)
    if attempted_js and not all_ok:
        f["parsingerror"] = 1

    if doc is not None:
        if js_sources:
            f["ishtmlwithjs"] = 1
        if any(a.has_e4x for a in asts):
            f["ishtmlwithjse4x"] = 1
    elif attempted_js:
        declared_js = _declared_is_js(declared_type)
        significant = any(a.has_significant_tokens for a in asts)
        if all_ok and (declared_js or significant):
            f["isjs"] = 1
            if any(a.has_e4x for a in asts):
                f["isjse4x"] = 1

    strings: list[str] = []
    counts = AstCounts()
    for ast in asts:
        strings.extend(ast.strings)
        counts.add_ast(ast)
        f["NumKeywords"] += ast.n_keywords
        f["NumLongVarOrFunNames"] += ast.n_long_names
    if asts:
        # subtract the synthetic Program roots so an empty script adds nothing
        f["NumNodes"] = counts.nodes - len(asts)

    f["NumStrings"] = len(strings)
    if strings:
        lengths = [len(s) for s in strings]
        f["MaxStrLen"] = max(lengths)
        f["TotalStringLength"] = sum(lengths)
        f["AvgStringLength"] = f["TotalStringLength"] / len(strings)
        f["NumLongStrings"] = sum(1 for n in lengths if n >= LONG_STRING_LEN)
        f["MaxStringEntropy"] = max(
            shannon_entropy(s.encode("utf-8", "replace")) for s in strings
        )
        f["TotalStringEntropy"] = shannon_entropy(
            b"".join(s.encode("utf-8", "replace") for s in strings)
        )
        f["ShellcodeProbability"] = shellcode_probability(strings)
        f["NumiframeString"] = sum(1 for s in strings if _count_word(s, "iframe"))

    f["NumFunctionCalls"] = counts.direct_calls
    f["NumBracketCalls"] = counts.bracket_calls
    f["NumBracketLookups"] = counts.bracket_lookups
    f["NumReassignmentOfSpecialObject"] = counts.special_reassignments
    f["NumPackerFunctions"] = counts.packer_total()
    f["NumActiveXObject"] = counts.named("ActiveXObject")
    for feat, fn_name in NAMED_CALL_FEATURES:
        f[feat] = counts.named(fn_name)

    attr_counts = doc.event_attributes if doc is not None else {}
    for name in EVENT_FEATURES:
        f[name] = attr_counts.get(name, 0) + sum(
            _count_word(src, name) for src in js_sources
        )

    return FeatureVector(f)
