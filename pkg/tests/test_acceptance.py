"""Release acceptance: one test per contract, each at its stated bound.

Deliberately coarse end-to-end checks; the per-module suites own the fine
grained cases. Every expected value comes from a fixture manifest or an
independent oracle, never from the code under test.
"""

import random
import time
from pathlib import Path

import pytest

from lios.disasm import compute_effects, compute_use_def
from lios.errors import MachoError
from lios.fixtures import corpus
from lios.fixtures.scaffold import ClassSpec, MethodSpec, Scaffold
from lios.graph import PropertyGraph
from lios.macho import decode_uleb128, encode_uleb128, parse_macho
from lios.objc import load_model
from lios.pipeline import AnalysisConfig, run_pipeline
from lios.traverse import (
    Traversal,
    exe_paths,
    reachables,
    run_query,
    step_dedup,
    step_filter,
    step_in,
    step_limit,
    step_out,
)

from conftest import graph_bundle, lift_fixture
from oracles import (
    exe_paths_oracle,
    reachable_oracle,
    reaching_defs_oracle,
    uleb_decode_oracle,
    uleb_encode_oracle,
)

RET = b"\xc0\x03\x5f\xd6"

FIXTURES = (corpus.msgsend_suite, corpus.listing_one_app, corpus.benign_app)


def call_graph(n, edges):
    g = PropertyGraph()
    for i in range(n):
        g.add_node("Function", {"ea": i, "name": f"f{i}", "is_ext": False})
    for s, d in edges:
        g.add_edge(s, d, "calls")
    return g


def target_key(g, edge):
    dst = g.node(edge.dst)
    if dst.get("is_ext"):
        return ("ext", dst.get("name"))
    return ("in", dst.get("ea"))


def manifest_key(entry):
    if entry["kind"] == "in_image":
        return ("in", entry["target_ea"])
    name = entry["target_name"]
    if name == "objc_msgSend" and entry.get("selector"):
        name = entry["selector"]
    return ("ext", name)


def is_subsequence(needle, haystack):
    it = iter(haystack)
    return all(any(x == want for x in it) for want in needle)


def test_01_uleb128_bulk_roundtrip_under_one_second():
    start = time.perf_counter()
    assert decode_uleb128(bytes([0x00]), 0) == (0, 1)
    assert decode_uleb128(bytes([0x7F]), 0) == (127, 1)
    assert decode_uleb128(bytes([0xE5, 0x8E, 0x26]), 0) == (624485, 3)
    rng = random.Random(0xACCE)
    for _ in range(10_000):
        value = rng.getrandbits(64)
        enc = encode_uleb128(value)
        assert enc == uleb_encode_oracle(value)
        assert decode_uleb128(enc, 0) == (value, len(enc))
        assert uleb_decode_oracle(enc) == (value, len(enc))
    assert time.perf_counter() - start < 1.0


def test_02_function_starts_exact_plus_100k_header_fuzz():
    start = time.perf_counter()
    for builder in FIXTURES + (corpus.perf_app,):
        blob, manifest = builder()
        assert parse_macho(blob).function_starts == manifest["function_starts"]

    bases = [bytearray(corpus.benign_app()[0]), bytearray(corpus.msgsend_suite()[0])]
    rng = random.Random(0xF422)
    for i in range(100_000):
        mutated = bytearray(bases[i % len(bases)])
        for _ in range(rng.randint(1, 8)):
            mutated[rng.randrange(min(len(mutated), 2048))] = rng.randrange(256)
        if rng.random() < 0.05:
            del mutated[rng.randrange(1, len(mutated)):]
        try:
            parse_macho(bytes(mutated))
        except MachoError:
            pass  # defined rejections are the expected outcome
    assert time.perf_counter() - start < 60.0


def test_03_objc_model_equals_manifests_including_root_cycle():
    for builder in FIXTURES:
        blob, manifest = builder()
        model = load_model(parse_macho(blob))
        concrete = {
            c.name: c
            for c in model.classes
            if not c.is_metaclass and not c.is_external
        }
        assert set(concrete) == {e["name"] for e in manifest["classes"]}
        for entry in manifest["classes"]:
            cls = concrete[entry["name"]]
            assert cls.address == entry["address"]
            meta = model.by_address[cls.metaclass_ref]
            assert meta.address == entry["meta_address"] and meta.is_metaclass
            sup = model.superclass_of(cls)
            assert (sup.name if sup else None) == entry["superclass"]
            assert [m.selector for m in cls.methods] == entry["methods"]
            assert [m.selector for m in meta.methods] == entry["class_methods"]
            impls = {
                m.selector: m.impl_address
                for m in cls.methods + meta.methods
                if m.impl_address is not None
            }
            assert impls == entry["impls"]
            assert [p.name for p in model.protocols_of(cls)] == entry["protocols"]
        assert sorted(p.name for p in model.protocols) == sorted(
            e["name"] for e in manifest["protocols"]
        )

    # an in-image root class closes the meta-class cycle on itself
    s = Scaffold()
    s.raw_func("r", RET)
    s.add_class(
        ClassSpec(name="Root", superclass=None, methods=[MethodSpec("go", "r")])
    )
    s.add_class(ClassSpec(name="Kid", superclass="Root"))
    blob, _ = s.build()
    model = load_model(parse_macho(blob))
    assert model.root_cycle_ok is True
    root_meta = model.by_address[model.by_name["Root"].metaclass_ref]
    assert root_meta.metaclass_ref == root_meta.address


def test_04_devirtualized_call_edges_equal_manifest_exactly():
    manifest, _image, _model, _functions, g = graph_bundle(corpus.msgsend_suite)
    assert manifest["msgsend_site_count"] >= 10

    got = set()
    residual_sites = set()
    for e in g.edges("calls"):
        src = g.node(e.src)
        if src.label != "Instruction":
            continue
        key = target_key(g, e)
        got.add((src.get("ea"), key, e.get("selector")))
        if key == ("ext", "objc_msgSend"):
            residual_sites.add(src.get("ea"))

    want = set()
    resolvable_sites = set()
    for entries in manifest["expected_calls"].values():
        for entry in entries:
            key = manifest_key(entry)
            want.add((entry["caller_ea"], key, entry.get("selector")))
            if key != ("ext", "objc_msgSend"):
                resolvable_sites.add(entry["caller_ea"])
    assert got == want
    assert not residual_sites & resolvable_sites


def test_05_use_def_equals_bruteforce_path_enumeration():
    def instr_successors(fn):
        succ = {}
        for b in fn.blocks:
            for i, ins in enumerate(b.instructions):
                if i + 1 < len(b.instructions):
                    succ[ins.ea] = [b.instructions[i + 1].ea]
                else:
                    succ[ins.ea] = list(b.successors)
        return succ

    checked = 0
    for builder in FIXTURES:
        blob, manifest = builder()
        _image, _model, functions = lift_fixture(blob, manifest)
        for fn in functions.values():
            if len(list(fn.instructions())) > 32:
                continue
            eff = compute_effects(fn)
            triples = [
                (
                    ins.ea,
                    {str(l) for l in eff.eff_defs[ins.ea]},
                    {str(l) for l in eff.eff_uses[ins.ea]},
                )
                for ins in fn.instructions()
            ]
            oracle = reaching_defs_oracle(
                triples, instr_successors(fn), fn.entry_ea
            )
            got = {}
            for use_ea, def_ea, loc in compute_use_def(fn):
                got.setdefault((use_ea, str(loc)), set()).add(def_ea)
            assert got == oracle, fn.name
            checked += 1
    assert checked >= 10  # the bound must not be vacuous


def test_06_traversal_oracles_monoid_laws_and_dsl_expansion():
    rng = random.Random(0x7EA7)

    # reachability against the BFS oracle, 100 random call graphs
    for _ in range(100):
        n = rng.randint(1, 200)
        edges = [
            (rng.randrange(n), rng.randrange(n))
            for _ in range(rng.randint(0, 3 * n))
        ]
        g = call_graph(n, edges)
        entry = rng.randrange(n)
        got = {node.id for node in reachables(g, entry)}
        assert got == reachable_oracle(n, edges, entry)

    # execution paths against the exhaustive DFS oracle, acyclic CFGs
    for _ in range(60):
        n = rng.randint(1, 12)
        succ = {
            i: sorted(
                {rng.randrange(i + 1, n) for _ in range(rng.randint(0, 3))}
            )
            if i + 1 < n
            else []
            for i in range(n)
        }
        g = PropertyGraph()
        for i in range(n):
            g.add_node("BasicBlock", {"ea": 0x1000 + 4 * i})
        for src, dsts in succ.items():
            for d in dsts:
                g.add_edge(src, d, "succ")
        for l_max in (1, 2, 3, 6, 64):
            assert exe_paths(g, 0, l_max=l_max) == exe_paths_oracle(
                succ, 0, l_max
            )

    # monoid laws on 1,000 random pipeline triples
    def pick(rng):
        return rng.choice(
            [
                step_out("calls"),
                step_in("calls"),
                Traversal.identity(),
                step_dedup(),
                step_filter(lambda node: node.get("ea", 0) % 2 == 0),
                step_limit(rng.randint(0, 6)),
                step_out("calls").star(),
                step_out("calls").then(step_dedup()),
            ]
        )

    ident = Traversal.identity()
    for _ in range(1_000):
        n = rng.randint(1, 30)
        edges = [
            (rng.randrange(n), rng.randrange(n))
            for _ in range(rng.randint(0, 2 * n))
        ]
        g = call_graph(n, edges)
        a, b, c = (pick(rng) for _ in range(3))
        xs = [rng.randrange(n) for _ in range(rng.randint(0, 6))]
        assert a.then(b).then(c)(g, xs) == a.then(b.then(c))(g, xs)
        assert ident.then(a)(g, xs) == a(g, xs) == a.then(ident)(g, xs)

    # every query shortcut equals its hand-written expansion
    _m, _i, _mo, _f, g = graph_bundle(corpus.msgsend_suite, linked=True)

    raw_calling = []
    for fn in g.nodes("Function"):
        if any(
            g.node(e.dst).get("name") == "malloc"
            for bb in g.out_nodes(fn.id, "has_bb")
            for ins in g.out_nodes(bb.id, "instr")
            for e in g.out_edges(ins.id, "calls")
        ):
            raw_calling.append(fn.id)
    assert [n.id for n in run_query(g, 'functions().calling("malloc")')] == raw_calling

    assert [n.id for n in run_query(g, 'functions().named("main")')] == [
        n.id for n in g.nodes("Function") if n.get("name") == "main"
    ]

    eps = [n.id for n in g.nodes("Function") if n.get("is_ep")]
    assert [n.id for n in run_query(g, "entrypoints()")] == eps
    assert [
        n.id for n in run_query(g, "functions().has(is_entrypoint, true)")
    ] == eps

    assert [n.id for n in run_query(g, 'functions().implementing("doWork")')] == [
        fn.id
        for fn in g.nodes("Function")
        if any(
            m.get("name") == "doWork" for m in g.out_nodes(fn.id, "implements")
        )
    ]

    raw_out = []
    for cls in g.nodes("Class"):
        raw_out.extend(
            n.id
            for n in sorted(g.out_nodes(cls.id, "has_meth"), key=lambda n: n.id)
        )
    assert [n.id for n in run_query(g, 'classes().out("has_meth")')] == raw_out

    raw_in = []
    for fn in g.nodes("Function"):
        raw_in.extend(
            n.id
            for n in sorted(g.in_nodes(fn.id, "has_func"), key=lambda n: n.id)
        )
    assert [n.id for n in run_query(g, 'functions().in("has_func")')] == raw_in

    assert [n.id for n in run_query(g, 'functions().has("is_ext", true)')] == [
        n.id for n in g.nodes("Function") if n.get("is_ext") is True
    ]

    full = [n.id for n in run_query(g, 'functions().out("calls")')]
    seen, deduped = set(), []
    for i in full:
        if i not in seen:
            seen.add(i)
            deduped.append(i)
    assert [
        n.id for n in run_query(g, 'functions().out("calls").dedup()')
    ] == deduped
    assert [
        n.id for n in run_query(g, 'functions().out("calls").limit(5)')
    ] == full[:5]


def test_07_bridge_finding_evidence_and_ats_matrix(tmp_path):
    # the vulnerable app: exactly one critical finding, bridge rule
    blob, manifest = corpus.listing_one_ipa()
    ipa = tmp_path / "app.ipa"
    ipa.write_bytes(blob)
    result = run_pipeline(AnalysisConfig(input=str(ipa), out_dir=str(tmp_path / "v")))
    criticals = [f for f in result.findings if f.severity == "critical"]
    assert len(criticals) == 1
    assert criticals[0].rule == "webview-bridge"
    assert result.exit_code == 1

    # its evidence walks the extraction chain through the four external calls
    g = result.graph

    def called_names(path):
        names = []
        for instr_id in path:
            for e in g.out_edges(instr_id, "calls"):
                names.append(g.node(e.dst).get("name"))
        return names

    chain = manifest["taint_chain_names"]
    assert [c.rstrip(":") for c in chain] == [
        "URL",
        "absoluteString",
        "componentsSeparatedByString",
        "objectAtIndex",
    ]
    assert any(
        is_subsequence(chain, called_names(path))
        for path in criticals[0].evidence
    )

    # the sanitized twin is findings-free
    blob2, _ = corpus.listing_one_ipa(sanitized=True, ats=None)
    ipa2 = tmp_path / "sanitized.ipa"
    ipa2.write_bytes(blob2)
    clean = run_pipeline(
        AnalysisConfig(input=str(ipa2), out_dir=str(tmp_path / "s"))
    )
    assert clean.findings == []
    assert clean.exit_code == 0

    # transport-security matrix: arbitrary / per-domain / absent
    benign, _ = corpus.benign_app()
    matrix = [
        (corpus.ATS_ARBITRARY, [("ats-disabled", "warning")]),
        (corpus.ATS_DOMAINS, [("ats-exception", "info")]),
        (None, []),
    ]
    for i, (ats, expected) in enumerate(matrix):
        blob3 = corpus.build_ipa(benign, corpus.info_plist(executable="B", ats=ats), executable="B")
        p = tmp_path / f"ats{i}.ipa"
        p.write_bytes(blob3)
        res = run_pipeline(AnalysisConfig(input=str(p), out_dir=str(tmp_path / f"a{i}")))
        assert [(f.rule, f.severity) for f in res.findings] == expected


def test_08_dump_load_isomorphism_and_run_determinism(tmp_path):
    for builder in FIXTURES:
        _m, _i, _mo, _f, g = graph_bundle(builder, linked=True)
        text = g.dumps()
        assert PropertyGraph.loads(text).dumps() == text

    blob, _ = corpus.listing_one_ipa()
    ipa = tmp_path / "app.ipa"
    ipa.write_bytes(blob)
    for d in ("one", "two"):
        run_pipeline(AnalysisConfig(input=str(ipa), out_dir=str(tmp_path / d)))
    for artifact in ("graph.jsonl", "findings.json", "stats.json"):
        assert (tmp_path / "one" / artifact).read_bytes() == (
            tmp_path / "two" / artifact
        ).read_bytes(), artifact


def test_09_largest_fixture_under_time_and_size_bounds(tmp_path):
    blob, manifest = corpus.perf_app()
    assert len(blob) > 250_000  # ~300 KB input
    assert len(manifest["functions"]) >= 100
    path = tmp_path / "perf.bin"
    path.write_bytes(blob)
    start = time.perf_counter()
    result = run_pipeline(
        AnalysisConfig(input=str(path), out_dir=str(tmp_path / "out"))
    )
    assert time.perf_counter() - start < 60.0
    assert Path(result.artifacts["graph"]).stat().st_size < 20 * 1024 * 1024
    assert result.stats["node_total"] > len(manifest["functions"])


@pytest.mark.skip(
    reason="the app behind the reference measurements (301 KB, 85 functions, "
    "6.8k nodes, 5.4 MB store) is not redistributable, so those exact numbers "
    "cannot be checked; the throughput test bounds the same pipeline on a "
    "generated stand-in"
)
def test_10_reference_measurements():
    raise AssertionError("unreachable: requires the original target app")
