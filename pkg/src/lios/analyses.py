"""Vulnerability analyses over the supergraph.

The taint engine tracks flows backward along def edges from a sink call's
argument register. A flow qualifies when the chain bottoms out in a value
that entered the function as a matching argument, or in the return value
of a named callee, without passing through a sanitizer call. Detectors
and the rule-file loader are thin layers over this one primitive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import MalformedRuleFile, NotAFunction
from .traverse import entrypoints, reachables, register_step

SEVERITIES = ("critical", "warning", "info")
_SEVERITY_RANK = {s: i for i, s in enumerate(SEVERITIES)}

# registers examined when a query verb asks for "any argument" of a sink
_ARG_REGISTERS = tuple(f"x{i}" for i in range(8))

# a single hop of interprocedural context: the bridge detector looks into
# direct callees but no further
CALL_DEPTH = 1

_TAINT_STEP_BUDGET = 100_000


@dataclass(frozen=True)
class ArgSource:
    """Taint enters as an argument register of a matching implementation.

    `arg` is the AAPCS register index: for method implementations x0 is
    self and x1 is _cmd, so the first explicit argument is 2.
    """

    arg: int
    selector: str | None = None  # exact method name; None matches any
    owner: str | None = None  # class or adopted protocol; None matches any

    def describe(self) -> str:
        where = self.selector or "any method"
        return f"argument x{self.arg} of {where}"


@dataclass(frozen=True)
class ReturnSource:
    callee: str

    def describe(self) -> str:
        return f"return value of {self.callee}"


@dataclass(frozen=True)
class Sink:
    callee: str
    arg: int


@dataclass(frozen=True)
class TaintSpec:
    sources: tuple = ()
    sinks: tuple = ()
    sanitizers: frozenset = frozenset()


@dataclass(frozen=True)
class TaintHit:
    sink_instr: int  # Instruction node id of the sink call
    sink: Sink
    source: str  # human description of where taint entered
    path: tuple[int, ...]  # instruction node ids, source first, sink last


@dataclass(frozen=True)
class Finding:
    rule: str
    severity: str
    subjects: tuple
    evidence: tuple
    message: str

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "severity": self.severity,
            "subjects": list(self.subjects),
            "evidence": [list(path) for path in self.evidence],
            "message": self.message,
        }


def sort_findings(findings) -> list[Finding]:
    return sorted(
        findings,
        key=lambda f: (_SEVERITY_RANK[f.severity], f.rule, f.subjects, f.message),
    )


def findings_to_json(findings) -> str:
    return json.dumps(
        [f.to_dict() for f in sort_findings(findings)],
        indent=2,
        sort_keys=True,
        ensure_ascii=False,
    )


# ---------------------------------------------------------------------------
# graph access helpers


def _require_function(graph, fn) -> int:
    nid = fn.id if hasattr(fn, "id") else fn
    if not graph.has_node(nid):
        raise NotAFunction(f"node {nid} is not in the graph")
    if graph.node(nid).label != "Function":
        raise NotAFunction(f"node {nid} is a {graph.node(nid).label}")
    return nid


def _instructions_of(graph, fn_id: int):
    for bb in graph.out_nodes(fn_id, "has_bb"):
        yield from graph.out_nodes(bb.id, "instr")


def _call_targets(graph, instr_id: int) -> list:
    """(target name, edge) pairs for every call made by one instruction."""
    out = []
    for e in graph.out_edges(instr_id, "calls"):
        out.append((graph.node(e.dst).get("name"), e))
    return out


def _uses_of(node) -> tuple[str, ...]:
    return tuple((node.get("uses") or "").split())


def _free_uses(graph, node) -> set[str]:
    """Used locations with no reaching definition: values entering from
    outside the function, i.e. arguments."""
    defined = {e.get("var") for e in graph.out_edges(node.id, "def")}
    return {u for u in _uses_of(node) if u not in defined}


def _implemented_methods(graph, fn_id: int) -> list:
    return graph.out_nodes(fn_id, "implements")


def _owner_matches(graph, method_node, owner: str) -> bool:
    name = method_node.get("owner")
    if name == owner:
        return True
    for cls in graph.find_nodes("Class", "name", name):
        for proto in graph.out_nodes(cls.id, "has_protocol"):
            if proto.get("name") == owner:
                return True
    return False


def _arg_registers_for(graph, fn_id: int, sources) -> dict[str, str]:
    """Map of argument register -> source description for this function."""
    out: dict[str, str] = {}
    methods = _implemented_methods(graph, fn_id)
    for src in sources:
        if not isinstance(src, ArgSource):
            continue
        applicable = True
        if src.selector is not None:
            applicable = any(m.get("name") == src.selector for m in methods)
        if applicable and src.owner is not None:
            applicable = any(
                m.get("name") == (src.selector or m.get("name"))
                and _owner_matches(graph, m, src.owner)
                for m in methods
            )
        if applicable:
            out.setdefault(f"x{src.arg}", src.describe())
    return out


# ---------------------------------------------------------------------------
# the taint engine


def tainted(graph, fn, spec: TaintSpec) -> list[TaintHit]:
    """Qualifying source-to-sink flows within one function.

    Walks def edges backward from each sink argument; the first hop is
    pinned to the argument's register, later hops follow any variable.
    A branch is abandoned when it runs through a sanitizer call.
    """
    fn_id = _require_function(graph, fn)
    arg_regs = _arg_registers_for(graph, fn_id, spec.sources)
    return_callees = {
        s.callee: s.describe() for s in spec.sources if isinstance(s, ReturnSource)
    }

    calls_at: dict[int, list[str]] = {}
    for node in _instructions_of(graph, fn_id):
        names = [name for name, _e in _call_targets(graph, node.id)]
        if names:
            calls_at[node.id] = names

    def sanitizer_call(nid: int) -> bool:
        return any(n in spec.sanitizers for n in calls_at.get(nid, ()))

    def source_at(nid: int) -> str | None:
        for name in calls_at.get(nid, ()):
            if name in return_callees:
                return return_callees[name]
        node = graph.node(nid)
        free = _free_uses(graph, node)
        for reg, desc in arg_regs.items():
            if reg in free:
                return desc
        return None

    hits: list[TaintHit] = []
    budget = _TAINT_STEP_BUDGET
    for sink in spec.sinks:
        reg = f"x{sink.arg}"
        for node in _instructions_of(graph, fn_id):
            if sink.callee not in calls_at.get(node.id, ()):
                continue
            found: dict[str, tuple[int, ...]] = {}
            first = sorted(
                {
                    e.dst
                    for e in graph.out_edges(node.id, "def")
                    if e.get("var") == reg
                }
            )
            if reg in _free_uses(graph, node) and reg in arg_regs:
                found.setdefault(arg_regs[reg], (node.id,))
            stack = [(node.id, nid) for nid in reversed(first)]
            trail: dict[int, int] = {}
            visited: set[int] = set()
            while stack and budget > 0:
                budget -= 1
                parent, cur = stack.pop()
                if cur in visited:
                    continue
                visited.add(cur)
                trail[cur] = parent
                if sanitizer_call(cur):
                    continue
                desc = source_at(cur)
                if desc is not None and desc not in found:
                    path = [cur]
                    while path[-1] != node.id:
                        path.append(trail[path[-1]])
                    found[desc] = tuple(path)
                for e in sorted(
                    graph.out_edges(cur, "def"), key=lambda e: e.dst
                ):
                    if e.dst not in visited:
                        stack.append((cur, e.dst))
            for desc in sorted(found):
                hits.append(TaintHit(node.id, sink, desc, found[desc]))
    hits.sort(key=lambda h: (h.sink_instr, h.sink.callee, h.sink.arg, h.source))
    return hits


# ---------------------------------------------------------------------------
# detectors


_BRIDGE_SELECTORS = (
    "shouldStartLoadWithRequest",
    "decidePolicyForNavigationAction",
)
# x0 self, x1 _cmd, x2 webView, x3 the request / navigation action
_BRIDGE_REQUEST_ARG = 3
_BRIDGE_SINKS = (Sink("NSClassFromString", 0), Sink("NSSelectorFromString", 0))


def _ats_state(graph) -> tuple[dict | None, bool]:
    """(parsed NSAppTransportSecurity dict or None, had_parse_error)."""
    programs = graph.nodes("Program")
    if not programs:
        return None, False
    prog = programs[0]
    if prog.get("info_error"):
        return None, True
    text = prog.get("info")
    if text is None:
        return None, False
    try:
        data = json.loads(text)
    except ValueError:
        return None, True
    ats = data.get("NSAppTransportSecurity") if isinstance(data, dict) else None
    return (ats if isinstance(ats, dict) else None), False


def _invoke_reachable(graph, fn_id: int, depth: int = CALL_DEPTH) -> bool:
    """Does this function (or a direct callee) fire a built invocation?"""
    frontier = [fn_id]
    seen = {fn_id}
    for _hop in range(depth + 1):
        nxt: list[int] = []
        for fid in frontier:
            for node in _instructions_of(graph, fid):
                for e in graph.out_edges(node.id, "calls"):
                    dst = graph.node(e.dst)
                    name = dst.get("name") or ""
                    selector = e.get("selector") or name
                    if selector.startswith("performSelector"):
                        return True
                    if selector == "invoke" and e.get("recv") == "NSInvocation":
                        return True
            for e in graph.out_edges(fid, "calls"):
                dst = graph.node(e.dst)
                if not dst.get("is_ext") and e.dst not in seen:
                    seen.add(e.dst)
                    nxt.append(e.dst)
        frontier = nxt
    return False


def detect_webview_bridge(graph) -> list[Finding]:
    """WebView delegates that build classes/selectors out of request data
    and then fire them through NSInvocation or performSelector."""
    ats, _err = _ats_state(graph)
    arbitrary = bool(ats and ats.get("NSAllowsArbitraryLoads") is True)
    severity = "critical" if arbitrary else "warning"
    findings = []
    for fn in graph.nodes("Function"):
        matched = [
            m
            for m in _implemented_methods(graph, fn.id)
            if any(s in (m.get("name") or "") for s in _BRIDGE_SELECTORS)
        ]
        if not matched:
            continue
        spec = TaintSpec(
            sources=tuple(
                ArgSource(_BRIDGE_REQUEST_ARG, selector=m.get("name"))
                for m in matched
            ),
            sinks=_BRIDGE_SINKS,
        )
        hits = tainted(graph, fn, spec)
        if not hits:
            continue
        if not _invoke_reachable(graph, fn.id):
            continue
        owner = matched[0].get("owner")
        sinks = sorted({h.sink.callee for h in hits})
        findings.append(
            Finding(
                rule="webview-bridge",
                severity=severity,
                subjects=(fn.id,),
                evidence=tuple(h.path for h in hits),
                message=(
                    f"{owner} routes request data from "
                    f"{matched[0].get('name')} into {', '.join(sinks)} and "
                    f"invokes the result"
                    + ("; ATS allows arbitrary loads" if arbitrary else "")
                ),
            )
        )
    return sort_findings(findings)


def ats_check(graph) -> list[Finding]:
    """App Transport Security posture from the bundled Info.plist."""
    programs = graph.nodes("Program")
    if not programs:
        return []
    prog = programs[0]
    ats, err = _ats_state(graph)
    findings = []
    if err:
        findings.append(
            Finding(
                rule="info-plist-malformed",
                severity="warning",
                subjects=(prog.id,),
                evidence=(),
                message="Info.plist could not be parsed; ATS posture unknown",
            )
        )
    if ats and ats.get("NSAllowsArbitraryLoads") is True:
        findings.append(
            Finding(
                rule="ats-disabled",
                severity="warning",
                subjects=(prog.id,),
                evidence=(),
                message="NSAllowsArbitraryLoads is set: ATS is disabled globally",
            )
        )
    if ats:
        domains = ats.get("NSExceptionDomains")
        if isinstance(domains, dict):
            for domain in sorted(domains):
                findings.append(
                    Finding(
                        rule="ats-exception",
                        severity="info",
                        subjects=(prog.id,),
                        evidence=(),
                        message=f"ATS exception configured for {domain}",
                    )
                )
    return sort_findings(findings)


def _framework_prefix(name: str) -> str:
    run = 0
    while run < len(name) and name[run].isupper():
        run += 1
    if run < len(name) and run > 0 and name[run].islower():
        run -= 1
    return name[:run] if run >= 2 else "other"


def api_inventory(graph) -> dict[str, list[str]]:
    """External API names actually reachable from the entrypoints, grouped
    by framework prefix. Dead code contributes nothing."""
    seen: set[int] = set()
    names: set[str] = set()
    for ep in entrypoints(graph):
        for node in reachables(graph, ep):
            if node.id in seen:
                continue
            seen.add(node.id)
            if node.get("is_ext"):
                names.add(node.get("name"))
    groups: dict[str, list[str]] = {}
    for name in sorted(names):
        groups.setdefault(_framework_prefix(name), []).append(name)
    return dict(sorted(groups.items()))


# ---------------------------------------------------------------------------
# rule files


@dataclass(frozen=True)
class TaintRule:
    id: str
    selectors: tuple
    spec: TaintSpec
    severity: str


def _parse_source(raw: dict, rule_id: str):
    kind = raw.get("kind")
    if kind == "argument":
        if not isinstance(raw.get("arg"), int):
            raise MalformedRuleFile(f"rule {rule_id}: argument source needs an int 'arg'")
        return ArgSource(
            raw["arg"], selector=raw.get("selector"), owner=raw.get("owner")
        )
    if kind == "return":
        if not isinstance(raw.get("callee"), str):
            raise MalformedRuleFile(f"rule {rule_id}: return source needs a 'callee'")
        return ReturnSource(raw["callee"])
    raise MalformedRuleFile(f"rule {rule_id}: unknown source kind {kind!r}")


def load_rules(source) -> list[TaintRule]:
    """Rule definitions from a JSON document (text, mapping, or path)."""
    if isinstance(source, dict):
        data = source
    else:
        if hasattr(source, "read"):
            text = source.read()
        elif isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            with open(source, "r", encoding="utf-8") as fp:
                text = fp.read()
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise MalformedRuleFile(f"rule file is not valid JSON: {exc}") from exc
    raw_rules = data.get("rules") if isinstance(data, dict) else None
    if not isinstance(raw_rules, list):
        raise MalformedRuleFile("rule file must contain a 'rules' array")
    out = []
    for raw in raw_rules:
        rule_id = raw.get("id")
        if not isinstance(rule_id, str) or not rule_id:
            raise MalformedRuleFile("every rule needs a string 'id'")
        severity = raw.get("severity", "warning")
        if severity not in SEVERITIES:
            raise MalformedRuleFile(f"rule {rule_id}: unknown severity {severity!r}")
        sinks = []
        for sink in raw.get("sinks", ()):
            if not isinstance(sink.get("callee"), str) or not isinstance(
                sink.get("arg"), int
            ):
                raise MalformedRuleFile(
                    f"rule {rule_id}: sinks need 'callee' and int 'arg'"
                )
            sinks.append(Sink(sink["callee"], sink["arg"]))
        if not sinks:
            raise MalformedRuleFile(f"rule {rule_id}: at least one sink required")
        sources = tuple(_parse_source(s, rule_id) for s in raw.get("sources", ()))
        if not sources:
            raise MalformedRuleFile(f"rule {rule_id}: at least one source required")
        out.append(
            TaintRule(
                id=rule_id,
                selectors=tuple(raw.get("selectors", ())),
                spec=TaintSpec(
                    sources=sources,
                    sinks=tuple(sinks),
                    sanitizers=frozenset(raw.get("sanitizers", ())),
                ),
                severity=severity,
            )
        )
    return out


def run_rules(graph, rules) -> list[Finding]:
    findings = []
    for rule in rules:
        for fn in graph.nodes("Function"):
            if fn.get("is_ext"):
                continue
            if rule.selectors:
                names = [
                    m.get("name") or ""
                    for m in _implemented_methods(graph, fn.id)
                ]
                if not any(s in n for s in rule.selectors for n in names):
                    continue
            hits = tainted(graph, fn, rule.spec)
            if not hits:
                continue
            sinks = sorted({h.sink.callee for h in hits})
            sources = sorted({h.source for h in hits})
            findings.append(
                Finding(
                    rule=rule.id,
                    severity=rule.severity,
                    subjects=(fn.id,),
                    evidence=tuple(h.path for h in hits),
                    message=(
                        f"{fn.get('name')}: {', '.join(sources)} reaches "
                        f"{', '.join(sinks)}"
                    ),
                )
            )
    return sort_findings(findings)


# ---------------------------------------------------------------------------
# query-language verb


def _tainted_verb(graph, stream, source: str, sink: str):
    spec = TaintSpec(
        sources=(ReturnSource(source),),
        sinks=tuple(Sink(sink, i) for i in range(len(_ARG_REGISTERS))),
    )
    for fid in stream:
        if graph.node(fid).label != "Function":
            continue
        if tainted(graph, fid, spec):
            yield fid


register_step("tainted", _tainted_verb)
