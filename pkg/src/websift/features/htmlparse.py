"""Tolerant HTML parsing: never fails, auto-closes dangling tags.

Built on html.parser with a stack so that unclosed elements become
parents of whatever follows them and unknown tags are kept as ordinary
elements.  Besides the element tree the parser collects everything the
feature extractor and the interaction planner need: script sources,
event attributes, forms, links, and buttons in document order.
"""

from __future__ import annotations

import base64
import binascii
from dataclasses import dataclass, field
from html.parser import HTMLParser
from urllib.parse import unquote_to_bytes

VOID_ELEMENTS = frozenset(
    """area base br col embed hr img input link meta param source track wbr""".split()
)


@dataclass
class ElementNode:
    tag: str
    attrs: list[tuple[str, str | None]] = field(default_factory=list)
    children: list["ElementNode"] = field(default_factory=list)
    text_parts: list[str] = field(default_factory=list)

    def attr(self, name: str) -> str | None:
        for k, v in self.attrs:
            if k == name:
                return v if v is not None else ""
        return None

    def text(self) -> str:
        return "".join(self.text_parts)


@dataclass
class FormSpec:
    action: str
    method: str
    fields: list[tuple[str, str]]  # (name, type)
    has_password: bool


@dataclass
class HtmlDoc:
    root: ElementNode
    node_count: int = 0  # element nodes plus non-blank text runs
    element_count: int = 0
    script_tag_count: int = 0
    data_url_script_count: int = 0
    script_sources: list[str] = field(default_factory=list)
    event_attributes: dict[str, int] = field(default_factory=dict)
    form_count: int = 0
    iframe_count: int = 0
    links: list[str] = field(default_factory=list)
    forms: list[FormSpec] = field(default_factory=list)
    # document-order interaction candidates: ("link", href) | ("form", FormSpec)
    # | ("button", formaction)
    interactables: list[tuple[str, object]] = field(default_factory=list)

    def event_total(self) -> int:
        return sum(self.event_attributes.values())


def _decode_data_url(url: str) -> str | None:
    """Extract the payload of a data: URL, or None if it cannot be read."""
    body = url[5:]
    if "," not in body:
        return None
    meta, payload = body.split(",", 1)
    if meta.lower().endswith(";base64"):
        try:
            raw = base64.b64decode(payload + "=" * (-len(payload) % 4), validate=False)
        except (binascii.Error, ValueError):
            return None
    else:
        raw = unquote_to_bytes(payload)
    return raw.decode("utf-8", "replace")


class _TreeBuilder(HTMLParser):
    def __init__(self, doc: HtmlDoc):
        super().__init__(convert_charrefs=True)
        self.doc = doc
        self.stack: list[ElementNode] = [doc.root]
        self.script_depth = 0
        self.script_buffer: list[str] = []
        self.script_has_src = False
        self.form_stack: list[FormSpec] = []

    # --- element plumbing

    def _open(self, tag: str, attrs, self_closing: bool):
        doc = self.doc
        node = ElementNode(tag, list(attrs))
        self.stack[-1].children.append(node)
        doc.element_count += 1
        doc.node_count += 1
        for name, value in attrs:
            if name.startswith("on") and len(name) > 2:
                doc.event_attributes[name] = doc.event_attributes.get(name, 0) + 1
        if tag == "iframe":
            doc.iframe_count += 1
        elif tag == "a":
            href = node.attr("href")
            if href:
                doc.links.append(href)
                doc.interactables.append(("link", href))
        elif tag == "form":
            spec = FormSpec(
                action=node.attr("action") or "",
                method=(node.attr("method") or "get").lower(),
                fields=[],
                has_password=False,
            )
            doc.form_count += 1
            doc.forms.append(spec)
            doc.interactables.append(("form", spec))
            if not self_closing:
                self.form_stack.append(spec)
        elif tag == "input":
            if self.form_stack:
                name = node.attr("name")
                ftype = (node.attr("type") or "text").lower()
                if name:
                    self.form_stack[-1].fields.append((name, ftype))
                if ftype == "password":
                    self.form_stack[-1].has_password = True
        elif tag == "button":
            formaction = node.attr("formaction")
            if formaction:
                doc.interactables.append(("button", formaction))
        elif tag == "script":
            doc.script_tag_count += 1
            src = node.attr("src")
            if src and src.lower().startswith("data:"):
                doc.data_url_script_count += 1
                decoded = _decode_data_url(src)
                if decoded is not None:
                    doc.script_sources.append(decoded)
            self.script_has_src = bool(src)
        if not self_closing and tag not in VOID_ELEMENTS:
            self.stack.append(node)
            if tag == "script":
                self.script_depth += 1
                self.script_buffer = []

    def handle_starttag(self, tag, attrs):
        self._open(tag, attrs, self_closing=False)

    def handle_startendtag(self, tag, attrs):
        self._open(tag, attrs, self_closing=True)
        if tag == "script" and not self.script_has_src:
            self.doc.script_sources.append("")

    def handle_endtag(self, tag):
        # close the nearest matching open element, auto-closing intermediates
        for idx in range(len(self.stack) - 1, 0, -1):
            if self.stack[idx].tag == tag:
                while len(self.stack) > idx:
                    closed = self.stack.pop()
                    self._element_closed(closed)
                return
        # stray end tag: ignored

    def _element_closed(self, node: ElementNode):
        if node.tag == "script":
            self.script_depth -= 1
            if not self.script_has_src or self.script_buffer:
                self.doc.script_sources.append("".join(self.script_buffer))
            self.script_buffer = []
            self.script_has_src = False
        elif node.tag == "form" and self.form_stack:
            self.form_stack.pop()

    def handle_data(self, data):
        if self.script_depth > 0:
            self.script_buffer.append(data)
        if data.strip():
            self.doc.node_count += 1
        if data:
            self.stack[-1].text_parts.append(data)

    def finish(self):
        while len(self.stack) > 1:
            self._element_closed(self.stack.pop())


def parse_html(text: str) -> HtmlDoc:
    """Parse `text` into an HtmlDoc.  Never raises on malformed markup."""
    doc = HtmlDoc(root=ElementNode("#document"))
    builder = _TreeBuilder(doc)
    try:
        builder.feed(text)
        builder.close()
    except Exception:
        # html.parser is robust, but totality matters more than completeness
        pass
    builder.finish()
    return doc
