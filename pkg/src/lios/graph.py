"""Labeled property multi-graph: storage, frontend assembly, passes, persistence.

The graph unifies three frontends (loader, class hierarchy, disassembly)
behind one store. Nodes and edges carry free-form properties; the edge
alphabet and its endpoint domains are validated on every insertion.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

from .disasm import (
    CallSite,
    call_effects_from_sites,
    compute_effects,
    compute_use_def,
    devirtualize,
    resolve_constant,
)
from .errors import (
    LabelDomainViolation,
    MalformedDump,
    MissingEndpoint,
    UnknownLabel,
)

DUMP_HEADER = "lios-graph v1"

NODE_LABELS = frozenset(
    {
        "Program",
        "Function",
        "Method",
        "Class",
        "Protocol",
        "BasicBlock",
        "Instruction",
        "Ivar",
    }
)

# edge label -> (allowed source labels, allowed destination labels)
EDGE_RULES: dict[str, tuple[frozenset, frozenset]] = {
    "implements": (frozenset({"Function"}), frozenset({"Method"})),
    "succ": (frozenset({"BasicBlock"}), frozenset({"BasicBlock"})),
    "def": (frozenset({"Instruction"}), frozenset({"Instruction"})),
    # call sites contribute instruction-level call edges; the function-level
    # projection is kept alongside for whole-graph reachability
    "calls": (frozenset({"Function", "Instruction"}), frozenset({"Function"})),
    "has_superclass": (frozenset({"Class"}), frozenset({"Class"})),
    # protocols may inherit protocols, so both appear in the domain
    "has_protocol": (frozenset({"Class", "Protocol"}), frozenset({"Protocol"})),
    "isa": (frozenset({"Class"}), frozenset({"Class"})),
    "has_meth": (frozenset({"Class", "Protocol"}), frozenset({"Method"})),
    "has_bb": (frozenset({"Function"}), frozenset({"BasicBlock"})),
    "instr": (frozenset({"BasicBlock"}), frozenset({"Instruction"})),
    "xref": (
        frozenset({"Instruction"}),
        frozenset({"Function", "Instruction", "Ivar", "BasicBlock", "Class"}),
    ),
    "has_func": (frozenset({"Program"}), frozenset({"Function"})),
}

_SCALARS = (str, bool, int, bytes)

# keys with a fixed type when present on a given label; other keys are
# admitted unchecked for extensibility
_KNOWN_KEYS: dict[str, dict[str, type | tuple]] = {
    "Program": {"ea": int, "name": str, "entltl": str, "info": str},
    "Function": {"ea": int, "name": str, "is_ext": bool, "llvm": str, "is_ep": bool},
    "Method": {"name": str},
    "Class": {"name": str},
    "Protocol": {"name": str},
    "BasicBlock": {"ea": int},
    "Instruction": {"ea": int, "bytes": bytes, "asm": str},
    "Ivar": {"ea": int},
}

DEFAULT_DELEGATE_PROTOCOLS = frozenset(
    {"UIApplicationDelegate", "UIWebViewDelegate", "WKNavigationDelegate"}
)


@dataclass
class Node:
    id: int
    label: str
    properties: dict

    def get(self, key, default=None):
        return self.properties.get(key, default)


@dataclass
class Edge:
    id: int
    src: int
    dst: int
    label: str
    properties: dict

    def get(self, key, default=None):
        return self.properties.get(key, default)


def _check_properties(label: str, properties: dict) -> None:
    known = _KNOWN_KEYS.get(label, {})
    for key, value in properties.items():
        if not isinstance(value, _SCALARS):
            raise TypeError(
                f"{label}.{key}: property values are text/int/bool/bytes, "
                f"not {type(value).__name__}"
            )
        want = known.get(key)
        if want is None:
            continue
        if want is int and isinstance(value, bool):
            raise TypeError(f"{label}.{key}: expected int, got bool")
        if not isinstance(value, want):
            raise TypeError(
                f"{label}.{key}: expected {want.__name__}, "
                f"got {type(value).__name__}"
            )


def _freeze(value):
    return value if not isinstance(value, bytes) else ("__bytes__", value)


def _props_key(properties: dict) -> tuple:
    return tuple(sorted((k, _freeze(v)) for k, v in properties.items()))


class PropertyGraph:
    def __init__(self):
        self._nodes: dict[int, Node] = {}
        self._edges: dict[int, Edge] = {}
        self._next_node = 0
        self._next_edge = 0
        self._by_label: dict[str, list[int]] = {}
        self._prop_index: dict[tuple, list[int]] = {}
        self._out: dict[int, list[int]] = {}
        self._in: dict[int, list[int]] = {}
        self._edge_keys: dict[tuple, int] = {}
        self.warnings: list[str] = []

    # ---- mutation ----

    def add_node(self, label: str, properties: dict | None = None) -> int:
        if label not in NODE_LABELS:
            raise UnknownLabel(f"unknown node label {label!r}")
        props = dict(properties or {})
        _check_properties(label, props)
        node_id = self._next_node
        self._next_node += 1
        self._nodes[node_id] = Node(node_id, label, props)
        self._by_label.setdefault(label, []).append(node_id)
        self._out[node_id] = []
        self._in[node_id] = []
        for key, value in props.items():
            self._prop_index.setdefault(
                (label, key, _freeze(value)), []
            ).append(node_id)
        return node_id

    def set_node_prop(self, node_id: int, key: str, value) -> None:
        node = self._nodes[node_id]
        _check_properties(node.label, {key: value})
        old = node.properties.get(key)
        if old is not None:
            bucket = self._prop_index.get((node.label, key, _freeze(old)))
            if bucket and node_id in bucket:
                bucket.remove(node_id)
        node.properties[key] = value
        self._prop_index.setdefault(
            (node.label, key, _freeze(value)), []
        ).append(node_id)

    def add_edge(
        self, src: int, dst: int, label: str, properties: dict | None = None
    ) -> int:
        if label not in EDGE_RULES:
            raise UnknownLabel(f"unknown edge label {label!r}")
        if src not in self._nodes or dst not in self._nodes:
            raise MissingEndpoint(f"edge {label} endpoints {src}->{dst}")
        domain, codomain = EDGE_RULES[label]
        src_label = self._nodes[src].label
        dst_label = self._nodes[dst].label
        if src_label not in domain or dst_label not in codomain:
            raise LabelDomainViolation(
                f"{label}: {src_label} -> {dst_label} not allowed"
            )
        props = dict(properties or {})
        for value in props.values():
            if not isinstance(value, _SCALARS):
                raise TypeError("edge property values are text/int/bool/bytes")
        # a true duplicate (same endpoints, label, and properties) coalesces;
        # parallel edges that differ in label or properties stay distinct
        key = (src, dst, label, _props_key(props))
        existing = self._edge_keys.get(key)
        if existing is not None:
            return existing
        edge_id = self._next_edge
        self._next_edge += 1
        self._edges[edge_id] = Edge(edge_id, src, dst, label, props)
        self._edge_keys[key] = edge_id
        self._out[src].append(edge_id)
        self._in[dst].append(edge_id)
        return edge_id

    # ---- access ----

    def node(self, node_id: int) -> Node:
        return self._nodes[node_id]

    def has_node(self, node_id: int) -> bool:
        return node_id in self._nodes

    def nodes(self, label: str | None = None):
        if label is None:
            return [self._nodes[i] for i in sorted(self._nodes)]
        return [self._nodes[i] for i in self._by_label.get(label, [])]

    def edges(self, label: str | None = None):
        out = [self._edges[i] for i in sorted(self._edges)]
        if label is None:
            return out
        return [e for e in out if e.label == label]

    def out_edges(self, node_id: int, label: str | None = None):
        out = [self._edges[i] for i in self._out.get(node_id, [])]
        if label is None:
            return out
        return [e for e in out if e.label == label]

    def in_edges(self, node_id: int, label: str | None = None):
        out = [self._edges[i] for i in self._in.get(node_id, [])]
        if label is None:
            return out
        return [e for e in out if e.label == label]

    def out_nodes(self, node_id: int, label: str):
        return [self._nodes[e.dst] for e in self.out_edges(node_id, label)]

    def in_nodes(self, node_id: int, label: str):
        return [self._nodes[e.src] for e in self.in_edges(node_id, label)]

    def find_nodes(self, label: str, key: str, value):
        ids = self._prop_index.get((label, key, _freeze(value)), [])
        return [self._nodes[i] for i in ids]

    def node_count(self) -> int:
        return len(self._nodes)

    def edge_count(self) -> int:
        return len(self._edges)

    def validate(self) -> list[str]:
        """Whole-graph domain/range re-check; empty list when well-formed."""
        problems = []
        for e in self._edges.values():
            if e.src not in self._nodes or e.dst not in self._nodes:
                problems.append(f"edge {e.id}: dangling endpoint")
                continue
            domain, codomain = EDGE_RULES[e.label]
            s, d = self._nodes[e.src].label, self._nodes[e.dst].label
            if s not in domain or d not in codomain:
                problems.append(f"edge {e.id}: {e.label} {s}->{d}")
        return problems

    def stats(self) -> dict:
        nodes: dict[str, int] = {}
        edges: dict[str, int] = {}
        n_props = 0
        for n in self._nodes.values():
            nodes[n.label] = nodes.get(n.label, 0) + 1
            n_props += len(n.properties)
        for e in self._edges.values():
            edges[e.label] = edges.get(e.label, 0) + 1
            n_props += len(e.properties)
        return {
            "nodes": dict(sorted(nodes.items())),
            "edges": dict(sorted(edges.items())),
            "node_total": len(self._nodes),
            "edge_total": len(self._edges),
            "property_total": n_props,
        }

    # ---- persistence ----

    def dumps(self) -> str:
        lines = [DUMP_HEADER]
        for node in (self._nodes[i] for i in sorted(self._nodes)):
            lines.append(
                json.dumps(
                    {
                        "t": "n",
                        "id": node.id,
                        "l": node.label,
                        "p": _encode_props(node.properties),
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
        for edge in (self._edges[i] for i in sorted(self._edges)):
            lines.append(
                json.dumps(
                    {
                        "t": "e",
                        "s": edge.src,
                        "d": edge.dst,
                        "l": edge.label,
                        "p": _encode_props(edge.properties),
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PropertyGraph":
        g = cls()
        lines = text.splitlines()
        if not lines or lines[0].strip() != DUMP_HEADER:
            raise MalformedDump(f"missing `{DUMP_HEADER}` header", 1)
        for number, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedDump(str(exc), number) from exc
            if not isinstance(rec, dict) or "t" not in rec:
                raise MalformedDump("record is not an object with 't'", number)
            try:
                if rec["t"] == "n":
                    node_id = rec["id"]
                    label = rec["l"]
                    if label not in NODE_LABELS:
                        raise MalformedDump(f"unknown label {label!r}", number)
                    if node_id in g._nodes:
                        raise MalformedDump(f"duplicate node id {node_id}", number)
                    props = _decode_props(rec.get("p", {}))
                    g._nodes[node_id] = Node(node_id, label, props)
                    g._by_label.setdefault(label, []).append(node_id)
                    g._out[node_id] = []
                    g._in[node_id] = []
                    for key, value in props.items():
                        g._prop_index.setdefault(
                            (label, key, _freeze(value)), []
                        ).append(node_id)
                    g._next_node = max(g._next_node, node_id + 1)
                elif rec["t"] == "e":
                    src, dst, label = rec["s"], rec["d"], rec["l"]
                    if src not in g._nodes or dst not in g._nodes:
                        raise MalformedDump(
                            f"edge references unknown node {src}->{dst}", number
                        )
                    g.add_edge(src, dst, label, _decode_props(rec.get("p", {})))
                else:
                    raise MalformedDump(f"unknown record type {rec['t']!r}", number)
            except KeyError as exc:
                raise MalformedDump(f"missing field {exc}", number) from exc
            except (UnknownLabel, LabelDomainViolation, MissingEndpoint) as exc:
                raise MalformedDump(str(exc), number) from exc
        return g


def _encode_props(props: dict) -> dict:
    out = {}
    for key, value in props.items():
        if isinstance(value, bytes):
            out[key] = {"b64": base64.b64encode(value).decode("ascii")}
        else:
            out[key] = value
    return out


def _decode_props(props: dict) -> dict:
    out = {}
    for key, value in props.items():
        if isinstance(value, dict) and set(value) == {"b64"}:
            out[key] = base64.b64decode(value["b64"])
        else:
            out[key] = value
    return out


def dump(graph: PropertyGraph, destination) -> None:
    text = graph.dumps()
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w", encoding="utf-8", newline="\n") as fp:
            fp.write(text)


def load(source) -> PropertyGraph:
    if hasattr(source, "read"):
        return PropertyGraph.loads(source.read())
    with open(source, "r", encoding="utf-8") as fp:
        return PropertyGraph.loads(fp.read())


# ---------------------------------------------------------------------------
# frontend assembly


def external_call_name(site: CallSite) -> str:
    """Graph-level name for an external call target.

    Dispatches that stayed unresolved but have a known selector surface
    under the selector itself (the URL/absoluteString/... nodes of a
    devirtualized graph); fully opaque dispatches keep objc_msgSend.
    """
    if site.target_name == "objc_msgSend" and site.selector:
        return site.selector
    return site.target_name


def build_from_frontends(
    image=None,
    model=None,
    functions=None,
    *,
    program_name: str = "program",
    info_json: str | None = None,
    entitlements: str | None = None,
    depth: int = 2,
) -> PropertyGraph:
    """Assemble the unified graph; tolerates any frontend being absent."""
    g = PropertyGraph()
    functions = functions or {}

    program_props: dict = {"name": program_name}
    if image is not None:
        program_props["ea"] = image.image_base
        if entitlements is None:
            from .macho import extract_entitlements

            entitlements = extract_entitlements(image)
    if entitlements:
        program_props["entltl"] = entitlements
    if info_json is not None:
        program_props["info"] = info_json
    program = g.add_node("Program", program_props)

    exported: set[int] = set()
    if image is not None:
        for sym in image.symbols:
            if sym.is_exported and sym.address is not None:
                exported.add(sym.address)

    fn_nodes: dict[int, int] = {}
    for entry in sorted(functions):
        fn = functions[entry]
        props = {"ea": entry, "name": fn.name, "is_ext": False}
        if entry in exported:
            props["exported"] = True
        fid = g.add_node("Function", props)
        fn_nodes[entry] = fid
        g.add_edge(program, fid, "has_func")

    externals: dict[str, int] = {}

    def external_node(name: str) -> int:
        nid = externals.get(name)
        if nid is None:
            nid = g.add_node(
                "Function", {"ea": -1, "name": name, "is_ext": True}
            )
            g.add_edge(program, nid, "has_func")
            externals[name] = nid
        return nid

    def in_image_node(ea: int, name: str) -> int:
        nid = fn_nodes.get(ea)
        if nid is None:
            nid = g.add_node("Function", {"ea": ea, "name": name, "is_ext": False})
            g.add_edge(program, nid, "has_func")
            fn_nodes[ea] = nid
        return nid

    instr_nodes: dict[int, int] = {}
    for entry in sorted(functions):
        fn = functions[entry]
        fid = fn_nodes[entry]
        sites = devirtualize(fn, model, functions=functions, depth=depth)
        call_effects = call_effects_from_sites(sites)
        compute_use_def(fn, call_effects)
        effects = compute_effects(fn, call_effects)

        bb_nodes: dict[int, int] = {}
        for block in fn.blocks:
            bid = g.add_node("BasicBlock", {"ea": block.ea})
            bb_nodes[block.ea] = bid
            g.add_edge(fid, bid, "has_bb")
            for ins in block.instructions:
                props = {"ea": ins.ea, "bytes": ins.bytes, "asm": ins.asm}
                uses = effects.eff_uses.get(ins.ea)
                if uses:
                    # free uses (no def edge) mark values entering as arguments
                    props["uses"] = " ".join(sorted(str(u) for u in uses))
                if ins.xref is not None:
                    props["xref"] = ins.xref
                    const = resolve_constant(model, ins.xref)
                    if const is not None and const.variant == "const_string":
                        props["const"] = const.text
                iid = g.add_node("Instruction", props)
                instr_nodes[ins.ea] = iid
                g.add_edge(bid, iid, "instr")
        for block in fn.blocks:
            for nxt in block.successors:
                g.add_edge(bb_nodes[block.ea], bb_nodes[nxt], "succ")
        for use_ea, def_ea, loc in sorted(
            fn.use_def, key=lambda t: (t[0], t[1], str(t[2]))
        ):
            g.add_edge(
                instr_nodes[use_ea], instr_nodes[def_ea], "def", {"var": str(loc)}
            )
        for ins in fn.instructions():
            if ins.xref is not None and ins.xref in fn_nodes:
                g.add_edge(instr_nodes[ins.ea], fn_nodes[ins.xref], "xref")
            if ins.branch_target is not None and ins.branch_target in fn_nodes:
                g.add_edge(
                    instr_nodes[ins.ea], fn_nodes[ins.branch_target], "xref"
                )

        for site in sites:
            if site.kind == "in_image":
                target = in_image_node(site.target_ea, site.target_name)
            else:
                target = external_node(external_call_name(site))
            props = {}
            if site.selector:
                props["selector"] = site.selector
            if site.receiver:
                props["recv"] = site.receiver
            g.add_edge(instr_nodes[site.caller_ea], target, "calls", props)
            g.add_edge(fid, target, "calls")

    if model is not None:
        _build_objc(g, model)
        g.warnings.extend(model.warnings)
    if image is not None:
        g.warnings.extend(image.warnings)
    return g


def _build_objc(g: PropertyGraph, model) -> None:
    cls_nodes: dict[int, int] = {}
    for cls in model.classes:
        props = {
            "name": cls.name,
            "ea": cls.address,
            "is_meta": cls.is_metaclass,
            "external": cls.is_external,
        }
        cls_nodes[cls.address] = g.add_node("Class", props)

    proto_nodes: dict[int, int] = {}
    for proto in model.protocols:
        proto_nodes[proto.address] = g.add_node(
            "Protocol", {"name": proto.name, "ea": proto.address}
        )

    for cls in model.classes:
        nid = cls_nodes[cls.address]
        sup = model.superclass_of(cls)
        if sup is not None and sup.address in cls_nodes:
            g.add_edge(nid, cls_nodes[sup.address], "has_superclass")
        if cls.metaclass_ref is not None and cls.metaclass_ref in cls_nodes:
            g.add_edge(nid, cls_nodes[cls.metaclass_ref], "isa")
        for ref in cls.protocol_refs:
            if ref in proto_nodes:
                g.add_edge(nid, proto_nodes[ref], "has_protocol")
        for method in cls.methods:
            props = {
                "name": method.selector,
                "owner": cls.name,
                "is_class_method": cls.is_metaclass,
            }
            if method.impl_address is not None:
                props["impl_ea"] = method.impl_address
            mid = g.add_node("Method", props)
            g.add_edge(nid, mid, "has_meth")
        for ivname, _ivtype, offset in cls.ivars:
            g.add_node("Ivar", {"ea": offset, "name": ivname, "owner": cls.name})

    for proto in model.protocols:
        nid = proto_nodes[proto.address]
        for ref in proto.inherited_protocol_refs:
            if ref in proto_nodes:
                g.add_edge(nid, proto_nodes[ref], "has_protocol")
        for method, required in [(m, True) for m in proto.required_methods] + [
            (m, False) for m in proto.optional_methods
        ]:
            mid = g.add_node(
                "Method",
                {"name": method.selector, "owner": proto.name, "required": required},
            )
            g.add_edge(nid, mid, "has_meth")


# ---------------------------------------------------------------------------
# passes


def link_pass(graph: PropertyGraph) -> dict:
    """Insert implements edges between methods and same-address functions."""
    by_ea: dict[int, Node] = {}
    for fn in graph.nodes("Function"):
        ea = fn.get("ea")
        if ea is not None and ea >= 0:
            by_ea[ea] = fn
    added = 0
    upgraded = 0
    unmatched = 0
    for method in graph.nodes("Method"):
        impl = method.get("impl_ea")
        if impl is None:
            continue
        fn = by_ea.get(impl)
        if fn is None:
            unmatched += 1
            graph.warnings.append(
                f"method {method.get('owner')}/{method.get('name')} "
                f"implementation {impl:#x} matches no function"
            )
            continue
        graph.add_edge(fn.id, method.id, "implements")
        added += 1
        if fn.get("name", "").startswith("sub_"):
            marker = "+" if method.get("is_class_method") else "-"
            graph.set_node_prop(
                fn.id, "name", f"{marker}[{method.get('owner')} {method.get('name')}]"
            )
            upgraded += 1
    return {"implements_added": added, "names_upgraded": upgraded,
            "unmatched_methods": unmatched}


def mark_entrypoints(
    graph: PropertyGraph, delegate_protocols: frozenset = DEFAULT_DELEGATE_PROTOCOLS
) -> dict:
    """Set is_ep on main, exported functions, and delegate-method impls."""
    marked: set[int] = set()
    for fn in graph.nodes("Function"):
        if fn.get("name") == "main" or fn.get("exported"):
            marked.add(fn.id)
    for proto in graph.nodes("Protocol"):
        if proto.get("name") not in delegate_protocols:
            continue
        for edge in graph.in_edges(proto.id, "has_protocol"):
            adopter = graph.node(edge.src)
            if adopter.label != "Class":
                continue
            for method in graph.out_nodes(adopter.id, "has_meth"):
                for impl_edge in graph.in_edges(method.id, "implements"):
                    marked.add(impl_edge.src)
    for fid in marked:
        graph.set_node_prop(fid, "is_ep", True)
    return {"marked": len(marked)}
