"""Traversal algebra over the property graph, plus the query language.

Traversals are stream transformers over node ids. Composition is
associative with `identity` as the unit, so pipelines can be regrouped,
repeated (`times`), or saturated to a fixpoint (`star`) without changing
meaning. Everything downstream (the query DSL, the analyses) is built
from these combinators.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import islice

from .errors import (
    NotABasicBlock,
    NotAFunction,
    NotAnInstruction,
    QuerySyntaxError,
    UnknownLabel,
    UnknownStep,
)
from .graph import EDGE_RULES


def _node_id(x) -> int:
    return x.id if hasattr(x, "id") else x


class Traversal:
    """A composable hop: function from an id stream to an id stream."""

    __slots__ = ("_run",)

    def __init__(self, run=None):
        self._run = run if run is not None else (lambda graph, stream: iter(stream))

    def run(self, graph, stream):
        return self._run(graph, stream)

    def __call__(self, graph, nodes) -> list[int]:
        return list(self._run(graph, (_node_id(x) for x in nodes)))

    @classmethod
    def identity(cls) -> "Traversal":
        return cls()

    def then(self, other: "Traversal") -> "Traversal":
        mine, theirs = self._run, other._run

        def run(graph, stream):
            return theirs(graph, mine(graph, stream))

        return Traversal(run)

    def times(self, n: int) -> "Traversal":
        if n < 0:
            raise ValueError("repetition count must be >= 0")
        out = Traversal.identity()
        for _ in range(n):
            out = out.then(self)
        return out

    def star(self) -> "Traversal":
        """Reflexive-transitive closure: everything reachable in 0+ hops."""
        step = self._run

        def run(graph, stream):
            seen: set[int] = set()
            order: list[int] = []
            frontier: list[int] = []
            for x in stream:
                if x not in seen:
                    seen.add(x)
                    order.append(x)
                    frontier.append(x)
            while frontier:
                nxt: list[int] = []
                for x in frontier:
                    for y in step(graph, [x]):
                        if y not in seen:
                            seen.add(y)
                            order.append(y)
                            nxt.append(y)
                frontier = nxt
            return iter(order)

        return Traversal(run)


def step_out(label: str) -> Traversal:
    if label not in EDGE_RULES:
        raise UnknownLabel(f"unknown edge label {label!r}")

    def run(graph, stream):
        for x in stream:
            for n in sorted(graph.out_nodes(x, label), key=lambda n: n.id):
                yield n.id

    return Traversal(run)


def step_in(label: str) -> Traversal:
    if label not in EDGE_RULES:
        raise UnknownLabel(f"unknown edge label {label!r}")

    def run(graph, stream):
        for x in stream:
            for n in sorted(graph.in_nodes(x, label), key=lambda n: n.id):
                yield n.id

    return Traversal(run)


def step_filter(pred) -> Traversal:
    def run(graph, stream):
        for x in stream:
            if pred(graph.node(x)):
                yield x

    return Traversal(run)


def step_dedup() -> Traversal:
    def run(graph, stream):
        seen: set[int] = set()
        for x in stream:
            if x not in seen:
                seen.add(x)
                yield x

    return Traversal(run)


def step_limit(n: int) -> Traversal:
    if n < 0:
        raise ValueError("limit must be >= 0")
    return Traversal(lambda graph, stream: islice(stream, n))


# ---------------------------------------------------------------------------
# core traversals

_CALLS = step_out("calls")


def _require(graph, node, label: str, err) -> int:
    nid = _node_id(node)
    if not graph.has_node(nid):
        raise err(f"node {nid} is not in the graph")
    got = graph.node(nid).label
    if got != label:
        raise err(f"node {nid} is a {got}, not a {label}")
    return nid


def is_entry(node) -> bool:
    return bool(node.get("is_ep") or node.get("is_entrypoint"))


def entrypoints(graph) -> list:
    return [n for n in graph.nodes("Function") if is_entry(n)]


def callees(graph, fn) -> list:
    nid = _require(graph, fn, "Function", NotAFunction)
    seen: set[int] = set()
    out = []
    for i in _CALLS.run(graph, [nid]):
        if i not in seen:
            seen.add(i)
            out.append(graph.node(i))
    return out


def reachables(graph, fn) -> list:
    """Functions reachable by 0 or more calls edges; includes the start."""
    nid = _require(graph, fn, "Function", NotAFunction)
    return [graph.node(i) for i in _CALLS.star().run(graph, [nid])]


def successors(graph, block) -> list:
    nid = _require(graph, block, "BasicBlock", NotABasicBlock)
    return sorted(
        graph.out_nodes(nid, "succ"), key=lambda n: (n.get("ea", 0), n.id)
    )


def exe_paths(graph, block, l_max: int = 64) -> list[tuple[int, ...]]:
    """All block paths from `block`, each at most l_max nodes long.

    A path ends at a block without successors or at the length bound, so
    loops unroll up to the bound. Successors are explored in ascending
    block-address order, making the enumeration deterministic.
    """
    entry = _require(graph, block, "BasicBlock", NotABasicBlock)
    if l_max < 1:
        raise ValueError("l_max must be >= 1")

    def succ_ids(nid: int) -> list[int]:
        return [
            n.id
            for n in sorted(
                graph.out_nodes(nid, "succ"), key=lambda n: (n.get("ea", 0), n.id)
            )
        ]

    out: list[tuple[int, ...]] = []
    stack: list[tuple[int, ...]] = [(entry,)]
    while stack:
        path = stack.pop()
        succs = succ_ids(path[-1])
        if not succs or len(path) >= l_max:
            out.append(path)
            continue
        for s in reversed(succs):
            stack.append(path + (s,))
    return out


def data_flow(graph, instr, var: str) -> list:
    """Definitions feeding `var` at `instr`, then everything they depend on.

    Only the first hop is filtered by the variable; past it the slice
    follows every def edge, so the result is the full backward dependency
    cone of that one operand.
    """
    nid = _require(graph, instr, "Instruction", NotAnInstruction)
    first = sorted(
        {e.dst for e in graph.out_edges(nid, "def") if e.get("var") == var}
    )
    seen = set(first)
    order = list(first)
    frontier = list(first)
    while frontier:
        nxt = []
        for x in frontier:
            for e in sorted(graph.out_edges(x, "def"), key=lambda e: e.dst):
                if e.dst not in seen:
                    seen.add(e.dst)
                    order.append(e.dst)
                    nxt.append(e.dst)
        frontier = nxt
    return [graph.node(i) for i in order]


# ---------------------------------------------------------------------------
# query language

_SOURCES = ("classes", "entrypoints", "functions")

_PROP_ALIASES = {"is_entrypoint": "is_ep"}


@dataclass(frozen=True)
class Step:
    name: str
    args: tuple
    pos: int


@dataclass(frozen=True)
class Query:
    source: str
    steps: tuple[Step, ...]


@dataclass(frozen=True)
class _Token:
    kind: str  # ident | string | int | . | ( | ) | , | eof
    text: str
    pos: int  # byte offset into the utf-8 encoding
    value: object = None


_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", '"': '"', "\\": "\\", "0": "\0"}


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    bpos = 0
    n = len(text)

    def bump(ch: str) -> None:
        nonlocal bpos
        bpos += len(ch.encode("utf-8"))

    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            bump(ch)
            i += 1
            continue
        start = bpos
        if ch in ".(),":
            tokens.append(_Token(ch, ch, start))
            bump(ch)
            i += 1
            continue
        if ch == '"':
            bump(ch)
            i += 1
            parts: list[str] = []
            while True:
                if i >= n:
                    raise QuerySyntaxError(
                        "unterminated string", start, expected=('"',)
                    )
                ch = text[i]
                if ch == '"':
                    bump(ch)
                    i += 1
                    break
                if ch == "\\":
                    if i + 1 >= n:
                        raise QuerySyntaxError(
                            "unterminated string", start, expected=('"',)
                        )
                    esc = text[i + 1]
                    parts.append(_ESCAPES.get(esc, esc))
                    bump(ch)
                    bump(esc)
                    i += 2
                    continue
                parts.append(ch)
                bump(ch)
                i += 1
            value = "".join(parts)
            tokens.append(_Token("string", value, start, value))
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1
            while j < n and text[j].isdigit():
                j += 1
            lexeme = text[i:j]
            tokens.append(_Token("int", lexeme, start, int(lexeme)))
            for c in lexeme:
                bump(c)
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            lexeme = text[i:j]
            tokens.append(_Token("ident", lexeme, start))
            for c in lexeme:
                bump(c)
            i = j
            continue
        raise QuerySyntaxError(f"unexpected character {ch!r}", start)
    tokens.append(_Token("eof", "", bpos))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0
        self.last: _Token | None = None

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        self.last = tok
        return tok

    def fail(self, message: str, expected: tuple = ()) -> None:
        tok = self.peek()
        if tok.kind == "eof":
            # an unfinished query points at the last thing actually written
            pos = self.last.pos if self.last is not None else tok.pos
            raise QuerySyntaxError(
                "unexpected end of query", pos, expected=expected
            )
        raise QuerySyntaxError(message, tok.pos, expected=expected)

    def expect(self, kind: str, what: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            self.fail(
                f"expected {what or kind}, got {tok.text!r}",
                expected=(what or kind,),
            )
        return self.advance()

    def parse(self) -> Query:
        src = self.expect("ident", "source")
        if src.text not in _SOURCES:
            raise QuerySyntaxError(
                f"unknown source {src.text!r}", src.pos, expected=_SOURCES
            )
        self.expect("(")
        self.expect(")")
        steps: list[Step] = []
        while self.peek().kind == ".":
            self.advance()
            name = self.expect("ident", "step name")
            self.expect("(")
            args: list = []
            if self.peek().kind != ")":
                args.append(self.argument())
                while self.peek().kind == ",":
                    self.advance()
                    args.append(self.argument())
            self.expect(")")
            step = Step(name.text, tuple(args), name.pos)
            _check_builtin(step)
            steps.append(step)
        if self.peek().kind != "eof":
            self.fail("trailing input after query")
        return Query(src.text, tuple(steps))

    def argument(self):
        tok = self.peek()
        if tok.kind in ("string", "int"):
            return self.advance().value
        if tok.kind == "ident":
            self.advance()
            if tok.text == "true":
                return True
            if tok.text == "false":
                return False
            return tok.text
        self.fail("expected an argument", expected=("argument",))


# built-in steps: name -> tuple of allowed types per positional argument
_BUILTIN_ARGS: dict[str, tuple[tuple, ...]] = {
    "calling": ((str,),),
    "named": ((str,),),
    "implementing": ((str,),),
    "has": ((str,), (str, int, bool)),
    "out": ((str,),),
    "in": ((str,),),
    "dedup": (),
    "limit": ((int,),),
}


def _check_builtin(step: Step) -> None:
    shape = _BUILTIN_ARGS.get(step.name)
    if shape is None:
        return
    if len(step.args) != len(shape):
        raise QuerySyntaxError(
            f"{step.name}() takes {len(shape)} argument(s), got {len(step.args)}",
            step.pos,
        )
    for arg, allowed in zip(step.args, shape):
        if isinstance(arg, bool) and bool not in allowed:
            raise QuerySyntaxError(
                f"{step.name}() does not take a boolean here", step.pos
            )
        if not isinstance(arg, allowed):
            raise QuerySyntaxError(
                f"{step.name}() argument {arg!r} has the wrong type", step.pos
            )
    if step.name == "limit" and step.args[0] < 0:
        raise QuerySyntaxError("limit must be >= 0", step.pos)


def parse_query(text: str) -> Query:
    return _Parser(text).parse()


# registered verbs: name -> fn(graph, id_stream, *args) -> id iterator
_STEP_REGISTRY: dict[str, object] = {}


def register_step(name: str, fn) -> None:
    if name in _BUILTIN_ARGS or name in _SOURCES:
        raise ValueError(f"{name!r} is a built-in step")
    _STEP_REGISTRY[name] = fn


def _source_ids(graph, source: str):
    if source == "functions":
        return (n.id for n in graph.nodes("Function"))
    if source == "classes":
        return (n.id for n in graph.nodes("Class"))
    return (n.id for n in entrypoints(graph))


def _calls_by_name(graph, fid: int, name: str) -> bool:
    for bb in graph.out_nodes(fid, "has_bb"):
        for ins in graph.out_nodes(bb.id, "instr"):
            for e in graph.out_edges(ins.id, "calls"):
                if graph.node(e.dst).get("name") == name:
                    return True
    return False


def _step_calling(graph, stream, name: str):
    for x in stream:
        if graph.node(x).label != "Function":
            continue
        if _calls_by_name(graph, x, name):
            yield x


def _step_implementing(graph, stream, name: str):
    for x in stream:
        if graph.node(x).label != "Function":
            continue
        for m in graph.out_nodes(x, "implements"):
            if m.get("name") == name:
                yield x
                break


def _apply_step(graph, stream, step: Step):
    name = step.name
    if name == "calling":
        return _step_calling(graph, stream, step.args[0])
    if name == "named":
        return step_filter(lambda n: n.get("name") == step.args[0]).run(
            graph, stream
        )
    if name == "implementing":
        return _step_implementing(graph, stream, step.args[0])
    if name == "has":
        key = _PROP_ALIASES.get(step.args[0], step.args[0])
        value = step.args[1]
        return step_filter(lambda n: n.get(key) == value).run(graph, stream)
    if name == "out":
        return step_out(step.args[0]).run(graph, stream)
    if name == "in":
        return step_in(step.args[0]).run(graph, stream)
    if name == "dedup":
        return step_dedup().run(graph, stream)
    if name == "limit":
        return step_limit(step.args[0]).run(graph, stream)
    fn = _STEP_REGISTRY.get(name)
    if fn is None:
        raise UnknownStep(f"unknown step {name!r}")
    return fn(graph, stream, *step.args)


def eval_query(graph, query: Query) -> list:
    stream = _source_ids(graph, query.source)
    for step in query.steps:
        stream = _apply_step(graph, stream, step)
    return [graph.node(i) for i in stream]


def run_query(graph, text: str) -> list:
    return eval_query(graph, parse_query(text))
