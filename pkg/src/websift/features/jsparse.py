"""Tolerant JavaScript tokenizer and lightweight AST builder.

Tokenization never fails: unknown characters become junk tokens and
unterminated literals are closed at end of input (flagging a lex error).
The grammar is deliberately small; it recognizes the constructs the
feature extractor counts (calls, member and bracket access, assignments,
literals, function definitions) and recovers at statement boundaries when
it cannot parse something, leaving `parse_ok` false.
"""

from __future__ import annotations

from dataclasses import dataclass, field

KEYWORDS = frozenset(
    """break case catch class const continue debugger default delete do else
    export extends finally for function if import in instanceof let new return
    super switch this throw try typeof var void while with yield await
    null true false undefined""".split()
)

SPECIAL_OBJECTS = frozenset(
    ["this", "window", "document", "location", "self", "top", "parent", "navigator"]
)

PACKER_PARAMS = ("p", "a", "c", "k", "e", "d")
PACKER_CALL_NAMES = frozenset(["unescape", "unpack"])

LONG_NAME_LEN = 30

_PUNCTS = [
    ">>>=",
    "...", "===", "!==", "**=", "<<=", ">>=", ">>>", "&&=", "||=", "??=",
    "=>", "==", "!=", "<=", ">=", "&&", "||", "??", "?.", "++", "--",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "**", "<<", ">>",
]
_SINGLE_PUNCTS = set("+-*/%=<>!&|^~?:;,.()[]{}")

ASSIGN_OPS = frozenset(
    ["=", "+=", "-=", "*=", "/=", "%=", "**=", "<<=", ">>=", ">>>=",
     "&=", "|=", "^=", "&&=", "||=", "??="]
)

_BINARY_BP = {
    "??": 1, "||": 1, "&&": 2, "|": 3, "^": 4, "&": 5,
    "==": 6, "!=": 6, "===": 6, "!==": 6,
    "<": 7, ">": 7, "<=": 7, ">=": 7, "in": 7, "instanceof": 7,
    "<<": 8, ">>": 8, ">>>": 8,
    "+": 9, "-": 9, "*": 10, "/": 10, "%": 10, "**": 11,
}

_MAX_PARSE_DEPTH = 200


@dataclass
class Token:
    kind: str  # ident, keyword, num, str, regex, xml, punct, junk, eof
    text: str
    pos: int
    value: str | None = None  # decoded literal content for str tokens


@dataclass
class Node:
    kind: str
    children: list["Node"] = field(default_factory=list)
    name: str | None = None
    value: str | None = None

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass
class JsAst:
    """Result of parsing one script source."""

    root: Node
    strings: list[str]
    parse_ok: bool
    has_e4x: bool
    n_tokens: int
    n_keywords: int
    n_long_names: int
    has_significant_tokens: bool

    def node_count(self) -> int:
        return sum(1 for _ in self.root.walk())


class _ParseFail(Exception):
    pass


# ---------------------------------------------------------------------------
# tokenizer

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "b": "\b", "f": "\f",
            "v": "\v", "0": "\0", "'": "'", '"': '"', "`": "`", "\\": "\\"}

# tokens after which a '/' or '<' starts an expression rather than an operator
_EXPR_KEYWORDS = frozenset(
    ["return", "typeof", "delete", "void", "new", "in", "instanceof", "case",
     "throw", "yield", "await", "do", "else"]
)


def _is_ident_start(ch: str) -> bool:
    return ch.isalpha() or ch in "_$"


def _is_ident_part(ch: str) -> bool:
    return ch.isalnum() or ch in "_$"


class _Lexer:
    def __init__(self, src: str):
        self.src = src
        self.i = 0
        self.n = len(src)
        self.tokens: list[Token] = []
        self.lex_error = False
        self.has_e4x = False

    def _prev_significant(self) -> Token | None:
        return self.tokens[-1] if self.tokens else None

    def _expression_position(self) -> bool:
        prev = self._prev_significant()
        if prev is None:
            return True
        if prev.kind == "punct":
            return prev.text not in (")", "]", "}")
        if prev.kind == "keyword":
            return prev.text in _EXPR_KEYWORDS
        return False  # ident, num, str, regex, xml

    def run(self) -> list[Token]:
        src, n = self.src, self.n
        while self.i < n:
            ch = src[self.i]
            if ch.isspace():
                self.i += 1
                continue
            if ch == "/" and self.i + 1 < n and src[self.i + 1] == "/":
                j = src.find("\n", self.i)
                self.i = n if j < 0 else j + 1
                continue
            if ch == "/" and self.i + 1 < n and src[self.i + 1] == "*":
                j = src.find("*/", self.i + 2)
                self.i = n if j < 0 else j + 2
                continue
            if _is_ident_start(ch):
                self._ident()
                continue
            if ch.isdigit() or (ch == "." and self.i + 1 < n and src[self.i + 1].isdigit()):
                self._number()
                continue
            if ch in "'\"":
                self._string(ch)
                continue
            if ch == "`":
                self._template()
                continue
            if ch == "/" and self._expression_position():
                if self._regex():
                    continue
            if ch == "<" and self._expression_position() and self.i + 1 < n \
                    and (src[self.i + 1].isalpha() or src[self.i + 1] == "_"):
                self._xml()
                continue
            self._punct(ch)
        self.tokens.append(Token("eof", "", n))
        return self.tokens

    def _ident(self):
        start = self.i
        src, n = self.src, self.n
        self.i += 1
        while self.i < n and _is_ident_part(src[self.i]):
            self.i += 1
        text = src[start:self.i]
        kind = "keyword" if text in KEYWORDS else "ident"
        self.tokens.append(Token(kind, text, start))

    def _number(self):
        start = self.i
        src, n = self.src, self.n
        if src[self.i] == "0" and self.i + 1 < n and src[self.i + 1] in "xXoObB":
            self.i += 2
            while self.i < n and (src[self.i].isalnum() or src[self.i] == "_"):
                self.i += 1
        else:
            seen_dot = False
            seen_exp = False
            while self.i < n:
                c = src[self.i]
                if c.isdigit():
                    self.i += 1
                elif c == "." and not seen_dot and not seen_exp:
                    seen_dot = True
                    self.i += 1
                elif c in "eE" and not seen_exp and self.i + 1 < n \
                        and (src[self.i + 1].isdigit() or src[self.i + 1] in "+-"):
                    seen_exp = True
                    self.i += 2
                else:
                    break
        self.tokens.append(Token("num", src[start:self.i], start))

    def _decode_escape(self) -> str:
        # self.i points at the char after the backslash
        src, n = self.src, self.n
        if self.i >= n:
            return ""
        c = src[self.i]
        self.i += 1
        if c == "x" and self.i + 1 < n + 1:
            hx = src[self.i:self.i + 2]
            if len(hx) == 2 and all(h in "0123456789abcdefABCDEF" for h in hx):
                self.i += 2
                return chr(int(hx, 16))
            return "x"
        if c == "u":
            if self.i < n and src[self.i] == "{":
                j = src.find("}", self.i)
                if j > 0:
                    hx = src[self.i + 1:j]
                    if hx and all(h in "0123456789abcdefABCDEF" for h in hx):
                        self.i = j + 1
                        try:
                            return chr(int(hx, 16))
                        except ValueError:
                            return "u"
                return "u"
            hx = src[self.i:self.i + 4]
            if len(hx) == 4 and all(h in "0123456789abcdefABCDEF" for h in hx):
                self.i += 4
                return chr(int(hx, 16))
            return "u"
        if c == "\n":
            return ""  # line continuation
        return _ESCAPES.get(c, c)

    def _string(self, quote: str):
        start = self.i
        src, n = self.src, self.n
        self.i += 1
        out: list[str] = []
        closed = False
        while self.i < n:
            c = src[self.i]
            if c == quote:
                self.i += 1
                closed = True
                break
            if c == "\\":
                self.i += 1
                out.append(self._decode_escape())
                continue
            if c == "\n":
                break  # unterminated on this line
            out.append(c)
            self.i += 1
        if not closed:
            self.lex_error = True
        self.tokens.append(Token("str", src[start:self.i], start, value="".join(out)))

    def _template(self):
        start = self.i
        src, n = self.src, self.n
        self.i += 1
        out: list[str] = []
        depth = 0
        closed = False
        while self.i < n:
            c = src[self.i]
            if c == "\\":
                self.i += 1
                out.append(self._decode_escape())
                continue
            if c == "`" and depth == 0:
                self.i += 1
                closed = True
                break
            if c == "$" and self.i + 1 < n and src[self.i + 1] == "{":
                depth += 1
                out.append(c)
                self.i += 1
                continue
            if c == "}" and depth > 0:
                depth -= 1
            out.append(c)
            self.i += 1
        if not closed:
            self.lex_error = True
        self.tokens.append(Token("str", src[start:self.i], start, value="".join(out)))

    def _regex(self) -> bool:
        # attempt to scan a regex literal; return False to fall back to punct
        src, n = self.src, self.n
        start = self.i
        i = self.i + 1
        in_class = False
        while i < n:
            c = src[i]
            if c == "\\":
                i += 2
                continue
            if c == "\n":
                return False
            if c == "[":
                in_class = True
            elif c == "]":
                in_class = False
            elif c == "/" and not in_class:
                i += 1
                while i < n and src[i].isalpha():
                    i += 1
                self.tokens.append(Token("regex", src[start:i], start))
                self.i = i
                return True
            i += 1
        return False

    def _xml(self):
        # E4X-style XML literal: consume balanced tags, tolerate anything else
        src, n = self.src, self.n
        start = self.i
        depth = 0
        i = self.i
        saw_tag = False
        while i < n:
            if src[i] == "<":
                closing = i + 1 < n and src[i + 1] == "/"
                j = i + 1
                quote = None
                while j < n:
                    c = src[j]
                    if quote:
                        if c == quote:
                            quote = None
                    elif c in "'\"":
                        quote = c
                    elif c == ">":
                        break
                    j += 1
                if j >= n:
                    self.lex_error = True
                    i = n
                    break
                self_closing = src[j - 1] == "/"
                if closing:
                    depth -= 1
                elif not self_closing:
                    depth += 1
                saw_tag = True
                i = j + 1
                if depth <= 0:
                    break
            else:
                i += 1
        if not saw_tag:
            self.lex_error = True
        self.has_e4x = True
        self.tokens.append(Token("xml", src[start:i], start))
        self.i = i

    def _punct(self, ch: str):
        src = self.src
        for p in _PUNCTS:
            if src.startswith(p, self.i):
                self.tokens.append(Token("punct", p, self.i))
                self.i += len(p)
                return
        if ch in _SINGLE_PUNCTS:
            self.tokens.append(Token("punct", ch, self.i))
        else:
            self.tokens.append(Token("junk", ch, self.i))
        self.i += 1


def tokenize(src: str) -> tuple[list[Token], bool, bool]:
    """Tokenize `src`; returns (tokens, lex_error, has_e4x)."""
    lx = _Lexer(src)
    toks = lx.run()
    return toks, lx.lex_error, lx.has_e4x


# ---------------------------------------------------------------------------
# parser

_SIGNIFICANT_PUNCTS = set(";{}()[]=")


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0
        self.ok = True
        self.depth = 0

    # --- token helpers

    def peek(self) -> Token:
        return self.toks[self.i]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def at(self, kind: str, text: str | None = None) -> bool:
        t = self.toks[self.i]
        return t.kind == kind and (text is None or t.text == text)

    def at_punct(self, text: str) -> bool:
        return self.at("punct", text)

    def expect_punct(self, text: str):
        if not self.at_punct(text):
            raise _ParseFail()
        self.next()

    def eat_punct(self, text: str) -> bool:
        if self.at_punct(text):
            self.next()
            return True
        return False

    def eat_keyword(self, text: str) -> bool:
        if self.at("keyword", text):
            self.next()
            return True
        return False

    # --- entry

    def parse_program(self) -> Node:
        root = Node("Program")
        while not self.at("eof"):
            try:
                root.children.append(self.statement())
            except (_ParseFail, RecursionError):
                self.ok = False
                self.depth = 0
                self._resync()
        return root

    def _resync(self):
        # skip to just past the next statement boundary
        while not self.at("eof"):
            t = self.next()
            if t.kind == "punct" and t.text in (";", "}"):
                return
        return

    # --- statements

    def statement(self) -> Node:
        t = self.peek()
        if t.kind == "punct":
            if t.text == "{":
                return self.block()
            if t.text == ";":
                self.next()
                return Node("Empty")
        if t.kind == "keyword":
            kw = t.text
            if kw in ("var", "let", "const"):
                return self.var_decl()
            if kw == "function":
                return self.function_def(require_name=False)
            if kw == "if":
                return self.if_stmt()
            if kw == "for":
                return self.for_stmt()
            if kw == "while":
                return self.while_stmt()
            if kw == "do":
                return self.do_stmt()
            if kw in ("return", "throw"):
                self.next()
                node = Node("Return" if kw == "return" else "Throw")
                if not self.at("eof") and not self.at_punct(";") and not self.at_punct("}"):
                    node.children.append(self.expression())
                self.eat_punct(";")
                return node
            if kw == "try":
                return self.try_stmt()
            if kw == "switch":
                return self.switch_stmt()
            if kw in ("break", "continue"):
                self.next()
                if self.at("ident"):
                    self.next()
                self.eat_punct(";")
                return Node("Jump")
            if kw == "debugger":
                self.next()
                self.eat_punct(";")
                return Node("Debugger")
            if kw == "class":
                return self.class_def()
            if kw in ("import", "export"):
                return self.module_stmt()
        if t.kind == "ident" and self.toks[self.i + 1].kind == "punct" \
                and self.toks[self.i + 1].text == ":":
            self.next()
            self.next()
            return Node("Label", [self.statement()], name=t.text)
        node = Node("ExprStmt", [self.expression()])
        self.eat_punct(";")
        return node

    def block(self) -> Node:
        self.expect_punct("{")
        node = Node("Block")
        while not self.at_punct("}"):
            if self.at("eof"):
                raise _ParseFail()
            node.children.append(self.statement())
        self.next()
        return node

    def var_decl(self) -> Node:
        self.next()
        node = Node("VarDecl")
        while True:
            node.children.append(self.declarator())
            if not self.eat_punct(","):
                break
        self.eat_punct(";")
        return node

    def declarator(self) -> Node:
        t = self.peek()
        if t.kind == "punct" and t.text in ("[", "{"):
            self._skip_balanced()
            target = Node("Pattern")
        elif t.kind == "ident" or (t.kind == "keyword" and t.text in ("undefined",)):
            self.next()
            target = Node("Ident", name=t.text)
        else:
            raise _ParseFail()
        d = Node("Declarator", [target])
        if self.eat_punct("="):
            d.children.append(self.assignment())
        return d

    def _skip_balanced(self):
        open_t = self.next().text
        close_t = {"[": "]", "{": "}", "(": ")"}[open_t]
        depth = 1
        while depth and not self.at("eof"):
            t = self.next()
            if t.kind == "punct":
                if t.text == open_t:
                    depth += 1
                elif t.text == close_t:
                    depth -= 1
        if depth:
            raise _ParseFail()

    def function_def(self, require_name: bool) -> Node:
        self.next()  # function
        self.eat_punct("*")
        name = None
        if self.at("ident"):
            name = self.next().text
        elif require_name:
            raise _ParseFail()
        params = self.param_list()
        body = self.block()
        node = Node("FunctionDef", [body], name=name)
        node.value = ",".join(params)
        return node

    def param_list(self) -> list[str]:
        self.expect_punct("(")
        params: list[str] = []
        while not self.at_punct(")"):
            if self.at("eof"):
                raise _ParseFail()
            t = self.peek()
            if t.kind == "punct" and t.text in ("[", "{"):
                self._skip_balanced()
                params.append("")
            elif t.kind == "punct" and t.text == "...":
                self.next()
                continue
            elif t.kind == "ident":
                self.next()
                params.append(t.text)
            else:
                raise _ParseFail()
            if self.eat_punct("="):
                # default value: consume an assignment expression
                self.assignment()
            if not self.at_punct(")"):
                self.expect_punct(",")
        self.next()
        return params

    def if_stmt(self) -> Node:
        self.next()
        self.expect_punct("(")
        cond = self.expression()
        self.expect_punct(")")
        node = Node("If", [cond, self.statement()])
        if self.eat_keyword("else"):
            node.children.append(self.statement())
        return node

    def for_stmt(self) -> Node:
        self.next()
        self.eat_keyword("await")
        self.expect_punct("(")
        node = Node("For")
        if not self.at_punct(";"):
            if self.peek().kind == "keyword" and self.peek().text in ("var", "let", "const"):
                self.next()
                node.children.append(self.declarator())
            else:
                node.children.append(self.expression(no_in=True))
        if self.at("keyword") and self.peek().text in ("in", "instanceof"):
            self.next()
            node.children.append(self.expression())
        elif self.at("ident") and self.peek().text == "of":
            self.next()
            node.children.append(self.expression())
        else:
            self.expect_punct(";")
            if not self.at_punct(";"):
                node.children.append(self.expression())
            self.expect_punct(";")
            if not self.at_punct(")"):
                node.children.append(self.expression())
        self.expect_punct(")")
        node.children.append(self.statement())
        return node

    def while_stmt(self) -> Node:
        self.next()
        self.expect_punct("(")
        cond = self.expression()
        self.expect_punct(")")
        return Node("While", [cond, self.statement()])

    def do_stmt(self) -> Node:
        self.next()
        body = self.statement()
        if not self.eat_keyword("while"):
            raise _ParseFail()
        self.expect_punct("(")
        cond = self.expression()
        self.expect_punct(")")
        self.eat_punct(";")
        return Node("DoWhile", [body, cond])

    def try_stmt(self) -> Node:
        self.next()
        node = Node("Try", [self.block()])
        if self.eat_keyword("catch"):
            if self.eat_punct("("):
                t = self.peek()
                if t.kind == "punct" and t.text in ("[", "{"):
                    self._skip_balanced()
                elif t.kind == "ident":
                    self.next()
                self.expect_punct(")")
            node.children.append(self.block())
        if self.eat_keyword("finally"):
            node.children.append(self.block())
        return node

    def switch_stmt(self) -> Node:
        self.next()
        self.expect_punct("(")
        node = Node("Switch", [self.expression()])
        self.expect_punct(")")
        self.expect_punct("{")
        while not self.at_punct("}"):
            if self.at("eof"):
                raise _ParseFail()
            if self.eat_keyword("case"):
                node.children.append(self.expression())
                self.expect_punct(":")
            elif self.eat_keyword("default"):
                self.expect_punct(":")
            else:
                node.children.append(self.statement())
        self.next()
        return node

    def class_def(self) -> Node:
        self.next()
        name = None
        if self.at("ident"):
            name = self.next().text
        node = Node("Class", name=name)
        if self.eat_keyword("extends"):
            node.children.append(self.unary())
        if not self.at_punct("{"):
            raise _ParseFail()
        self._skip_balanced()
        return node

    def module_stmt(self) -> Node:
        # import/export: consume loosely up to statement end
        self.next()
        node = Node("Module")
        while not self.at("eof") and not self.at_punct(";"):
            t = self.peek()
            if t.kind == "punct" and t.text in ("{", "(", "["):
                self._skip_balanced()
                continue
            if t.kind == "punct" and t.text == "}":
                break
            self.next()
        self.eat_punct(";")
        return node

    # --- expressions

    def expression(self, no_in: bool = False) -> Node:
        node = self.assignment(no_in=no_in)
        while self.at_punct(","):
            self.next()
            node = Node("Sequence", [node, self.assignment(no_in=no_in)])
        return node

    def assignment(self, no_in: bool = False) -> Node:
        self.depth += 1
        if self.depth > _MAX_PARSE_DEPTH:
            raise _ParseFail()
        try:
            left = self.ternary(no_in=no_in)
            t = self.peek()
            if t.kind == "punct" and t.text in ASSIGN_OPS:
                self.next()
                right = self.assignment(no_in=no_in)
                return Node("Assign", [left, right], value=t.text)
            return left
        finally:
            self.depth -= 1

    def ternary(self, no_in: bool = False) -> Node:
        cond = self.binary(1, no_in=no_in)
        if self.at_punct("?"):
            self.next()
            yes = self.assignment()
            self.expect_punct(":")
            no = self.assignment(no_in=no_in)
            return Node("Ternary", [cond, yes, no])
        return cond

    def binary(self, min_bp: int, no_in: bool = False) -> Node:
        left = self.unary()
        while True:
            t = self.peek()
            op = None
            if t.kind == "punct" and t.text in _BINARY_BP:
                op = t.text
            elif t.kind == "keyword" and t.text in ("in", "instanceof"):
                if t.text == "in" and no_in:
                    break
                op = t.text
            if op is None:
                break
            bp = _BINARY_BP[op]
            if bp < min_bp:
                break
            self.next()
            right = self.binary(bp + 1, no_in=no_in)
            left = Node("Binary", [left, right], value=op)
        return left

    def unary(self) -> Node:
        self.depth += 1
        if self.depth > _MAX_PARSE_DEPTH:
            raise _ParseFail()
        try:
            t = self.peek()
            if t.kind == "punct" and t.text in ("!", "~", "+", "-", "++", "--"):
                self.next()
                return Node("Unary", [self.unary()], value=t.text)
            if t.kind == "keyword" and t.text in ("typeof", "void", "delete", "await", "yield"):
                self.next()
                if t.text == "yield" and (self.at_punct(";") or self.at_punct(")") or self.at("eof")):
                    return Node("Unary", value=t.text)
                return Node("Unary", [self.unary()], value=t.text)
            if t.kind == "keyword" and t.text == "new":
                self.next()
                if self.at_punct("."):  # new.target
                    self.next()
                    if self.at("ident"):
                        self.next()
                    return Node("Ident", name="new.target")
                return Node("New", [self.unary()])
            return self.postfix()
        finally:
            self.depth -= 1

    def postfix(self) -> Node:
        node = self.primary()
        while True:
            t = self.peek()
            if t.kind == "punct" and t.text in (".", "?."):
                self.next()
                prop = self.peek()
                if prop.kind not in ("ident", "keyword"):
                    raise _ParseFail()
                self.next()
                node = Node("MemberDot", [node], name=prop.text)
            elif t.kind == "punct" and t.text == "[":
                self.next()
                idx = self.expression()
                self.expect_punct("]")
                node = Node("MemberBracket", [node, idx])
            elif t.kind == "punct" and t.text == "(":
                args = self.arguments()
                kind = "BracketCall" if node.kind == "MemberBracket" else "Call"
                call = Node(kind, [node] + args)
                if node.kind == "Ident":
                    call.name = node.name
                elif node.kind == "MemberDot":
                    call.name = node.name
                node = call
            elif t.kind == "punct" and t.text in ("++", "--"):
                self.next()
                node = Node("Unary", [node], value="post" + t.text)
            elif t.kind == "str" and t.text.startswith("`"):
                # tagged template
                self.next()
                node = Node("Call", [node, Node("Str", value=t.value)], name=node.name)
            else:
                break
        return node

    def arguments(self) -> list[Node]:
        self.expect_punct("(")
        args: list[Node] = []
        while not self.at_punct(")"):
            if self.at("eof"):
                raise _ParseFail()
            self.eat_punct("...")
            args.append(self.assignment())
            if not self.at_punct(")"):
                self.expect_punct(",")
        self.next()
        return args

    def primary(self) -> Node:
        t = self.peek()
        if t.kind == "ident":
            self.next()
            if self.at_punct("=>"):
                self.next()
                return self.arrow_body(Node("Ident", name=t.text))
            return Node("Ident", name=t.text)
        if t.kind == "num":
            self.next()
            return Node("Num", value=t.text)
        if t.kind == "str":
            self.next()
            return Node("Str", value=t.value)
        if t.kind == "regex":
            self.next()
            return Node("Regex", value=t.text)
        if t.kind == "xml":
            self.next()
            return Node("Xml", value=t.text)
        if t.kind == "keyword":
            kw = t.text
            if kw == "this":
                self.next()
                return Node("This")
            if kw in ("true", "false", "null", "undefined"):
                self.next()
                return Node("Literal", value=kw)
            if kw == "function":
                return self.function_def(require_name=False)
            if kw == "class":
                return self.class_def()
            if kw == "super":
                self.next()
                return Node("Ident", name="super")
            if kw == "import":  # dynamic import()
                self.next()
                return Node("Ident", name="import")
            raise _ParseFail()
        if t.kind == "punct":
            if t.text == "(":
                return self.paren_or_arrow()
            if t.text == "[":
                return self.array_literal()
            if t.text == "{":
                return self.object_literal()
        raise _ParseFail()

    def paren_or_arrow(self) -> Node:
        # try to spot an arrow function by scanning to the matching paren
        j = self.i
        depth = 0
        while j < len(self.toks):
            tk = self.toks[j]
            if tk.kind == "punct":
                if tk.text in ("(", "[", "{"):
                    depth += 1
                elif tk.text in (")", "]", "}"):
                    depth -= 1
                    if depth == 0:
                        break
            elif tk.kind == "eof":
                break
            j += 1
        is_arrow = (
            j + 1 < len(self.toks)
            and self.toks[j + 1].kind == "punct"
            and self.toks[j + 1].text == "=>"
        )
        if is_arrow:
            params = self.param_list()
            self.expect_punct("=>")
            node = self.arrow_body(None)
            node.value = ",".join(params)
            return node
        self.expect_punct("(")
        node = self.expression()
        self.expect_punct(")")
        return Node("Paren", [node])

    def arrow_body(self, param: Node | None) -> Node:
        body = self.block() if self.at_punct("{") else self.assignment()
        children = [body] if param is None else [param, body]
        return Node("Arrow", children)

    def array_literal(self) -> Node:
        self.expect_punct("[")
        node = Node("Array")
        while not self.at_punct("]"):
            if self.at("eof"):
                raise _ParseFail()
            if self.eat_punct(","):
                continue
            self.eat_punct("...")
            node.children.append(self.assignment())
        self.next()
        return node

    def object_literal(self) -> Node:
        self.expect_punct("{")
        node = Node("Object")
        while not self.at_punct("}"):
            if self.at("eof"):
                raise _ParseFail()
            if self.eat_punct(","):
                continue
            if self.eat_punct("..."):
                node.children.append(self.assignment())
                continue
            t = self.peek()
            if t.kind in ("ident", "keyword") and t.text in ("get", "set") \
                    and self.toks[self.i + 1].kind in ("ident", "keyword", "str", "num"):
                self.next()
                t = self.peek()
            if t.kind in ("ident", "keyword", "str", "num"):
                self.next()
                key = Node("Key", name=t.text if t.kind != "str" else t.value)
            elif t.kind == "punct" and t.text == "[":
                self.next()
                key = Node("Key", [self.assignment()])
                self.expect_punct("]")
            else:
                raise _ParseFail()
            if self.eat_punct(":"):
                node.children.append(Node("Property", [key, self.assignment()]))
            elif self.at_punct("("):
                params = self.param_list()
                body = self.block()
                fn = Node("FunctionDef", [body], name=key.name)
                fn.value = ",".join(params)
                node.children.append(Node("Property", [key, fn]))
            else:
                node.children.append(Node("Property", [key]))
        self.next()
        return node


def parse_js(src: str) -> JsAst:
    """Parse one script source, always returning a usable JsAst."""
    tokens, lex_error, has_e4x = tokenize(src)
    parser = _Parser(tokens)
    try:
        root = parser.parse_program()
        ok = parser.ok
    except (_ParseFail, RecursionError):  # defensive; parse_program recovers itself
        root = Node("Program")
        ok = False
    if lex_error:
        ok = False
    strings = [t.value for t in tokens if t.kind == "str" and t.value is not None]
    n_keywords = sum(1 for t in tokens if t.kind == "keyword")
    n_long_names = sum(1 for t in tokens if t.kind == "ident" and len(t.text) >= LONG_NAME_LEN)
    significant = any(
        (t.kind == "punct" and t.text in _SIGNIFICANT_PUNCTS) or t.kind == "keyword"
        for t in tokens
    )
    if any(t.kind == "junk" for t in tokens):
        ok = False
    return JsAst(
        root=root,
        strings=strings,
        parse_ok=ok,
        has_e4x=has_e4x,
        n_tokens=len(tokens) - 1,
        n_keywords=n_keywords,
        n_long_names=n_long_names,
        has_significant_tokens=significant,
    )


@dataclass
class AstCounts:
    """Aggregated structural counts over one or more parsed scripts."""

    nodes: int = 0
    direct_calls: int = 0
    bracket_calls: int = 0
    bracket_lookups: int = 0
    special_reassignments: int = 0
    packer_functions: int = 0
    named_calls: dict[str, int] = field(default_factory=dict)

    def add_ast(self, ast: JsAst) -> None:
        for node in ast.root.walk():
            self.nodes += 1
            k = node.kind
            if k == "Call":
                if node.name is not None:
                    self.direct_calls += 1
                    self.named_calls[node.name] = self.named_calls.get(node.name, 0) + 1
                else:
                    self.direct_calls += 1
            elif k == "BracketCall":
                self.bracket_calls += 1
            elif k == "MemberBracket":
                self.bracket_lookups += 1
            elif k == "Assign" and node.value == "=":
                target = node.children[0]
                if target.kind == "This" or \
                        (target.kind == "Ident" and target.name in SPECIAL_OBJECTS):
                    self.special_reassignments += 1
            elif k == "FunctionDef":
                if node.value is not None and tuple(node.value.split(",")) == PACKER_PARAMS:
                    self.packer_functions += 1

    def named(self, name: str) -> int:
        return self.named_calls.get(name, 0)

    def packer_total(self) -> int:
        hits = self.packer_functions
        for name in PACKER_CALL_NAMES:
            hits += self.named(name)
        return hits
