"""Decoder, CFG, use-def, backtrace, and devirtualization tests.

Hand-stated expectations come from assembling known source; cross-checks use
the brute-force oracles in oracles.py over the same effective def/use sets.
"""

import struct

import pytest

from lios.disasm import (
    CallSite,
    CONST_STRING,
    Loc,
    OWN_SELECTOR,
    SELF_REF,
    UNKNOWN,
    backtrace,
    build_function,
    build_function_from_instructions,
    call_effects_from_sites,
    compute_effects,
    compute_use_def,
    decode,
    devirtualize,
    format_text_disasm,
    parse_text_disasm,
    reg,
    stack_slot,
)
from lios.errors import EmptyRange, MalformedTextDisasm
from lios.fixtures.asm import assemble
from lios.fixtures.scaffold import ClassSpec, MethodSpec, Scaffold
from lios.macho import parse_macho
from lios.objc import load_model
from oracles import reaching_defs_oracle

ORIGIN = 0x100004000


def fn_from_asm(source: str, origin: int = ORIGIN, name: str = "f"):
    res = assemble(source, origin=origin)
    instrs = [
        decode(res.code[i : i + 4], origin + i) for i in range(0, len(res.code), 4)
    ]
    return build_function_from_instructions(instrs, name)


def instr_successors(fn):
    succ = {}
    for b in fn.blocks:
        for i, ins in enumerate(b.instructions):
            if i + 1 < len(b.instructions):
                succ[ins.ea] = [b.instructions[i + 1].ea]
            else:
                succ[ins.ea] = list(b.successors)
    return succ


class TestDecode:
    def test_ret(self):
        ins = decode(struct.pack("<I", 0xD65F03C0), ORIGIN)
        assert ins.asm == "ret"
        assert ins.kind == "return"
        assert ins.defs == set()

    def test_mov_immediate(self):
        ins = decode(struct.pack("<I", 0xD2800020), ORIGIN)
        assert ins.asm == "mov x0, #1"
        assert ins.kind == "assignment"
        assert ins.defs == {reg("x0")}
        assert ins.immediate == 1

    def test_zero_word_is_opaque(self):
        ins = decode(b"\x00\x00\x00\x00", ORIGIN)
        assert ins.kind == "other"
        assert ins.asm == ".word 0x00000000"
        assert ins.defs == set() and ins.uses == set()

    def test_unknown_encodings_are_values(self):
        for word in (0xFFFFFFFF, 0x4E281C05, 0x1E604000, 0x9BC07C00):
            ins = decode(struct.pack("<I", word), ORIGIN)
            assert ins.kind == "other"
            assert ins.asm == f".word 0x{word:08x}"

    @pytest.mark.parametrize(
        "text",
        [
            "mov x0, #1",
            "mov w7, #65535",
            "movk x0, #2, lsl #16",
            "mov x8, x9",
            "add x0, x1, #4",
            "add x2, x1, #1, lsl #12",
            "sub sp, sp, #32",
            "adds x4, x1, x2",
            "sub x3, x2, x1",
            "cmp x0, x1",
            "cmp x0, #5",
            "cmn x3, #0",
            "ldr x0, [x1]",
            "ldr x0, [sp, #16]",
            "ldr w5, [x2, #8]",
            "str x0, [sp, #24]",
            "str w1, [x2]",
            "ldur x3, [x1, #-8]",
            "stur x3, [x1, #-16]",
            "ldr x9, [x10, #8]!",
            "str x9, [x10], #16",
            "stp x29, x30, [sp, #-16]!",
            "ldp x29, x30, [sp], #16",
            "stp x20, x21, [sp, #32]",
            "blr x8",
            "br x8",
            "ret",
            "nop",
        ],
    )
    def test_canonical_text_reassembles_identically(self, text):
        code = assemble(text).code
        rendered = decode(code, 0).asm
        assert assemble(rendered).code == code

    def test_w_registers_normalize_to_x_locations(self):
        ins = decode(assemble("mov w3, #7").code, ORIGIN)
        assert ins.asm == "mov w3, #7"
        assert ins.defs == {reg("x3")}

    def test_zero_register_is_not_a_location(self):
        ins = decode(assemble("str xzr, [x1]").code, ORIGIN)
        assert ins.uses == {reg("x1")}
        ins = decode(assemble("mov x0, xzr").code, ORIGIN)
        assert ins.uses == set() and ins.defs == {reg("x0")}

    def test_branch_target_arithmetic(self):
        code = assemble("b target\nnop\ntarget: nop", origin=ORIGIN).code
        ins = decode(code[:4], ORIGIN)
        assert ins.branch_target == ORIGIN + 8
        back = assemble("target: nop\nb target", origin=ORIGIN).code
        ins = decode(back[4:8], ORIGIN + 4)
        assert ins.branch_target == ORIGIN

    def test_conditional_branches(self):
        src = "top: b.ne top\ncbz x0, top\ncbnz w1, top\ntbz x2, #3, top\ntbnz x2, #33, top"
        code = assemble(src, origin=ORIGIN).code
        for i in range(0, len(code), 4):
            ins = decode(code[i : i + 4], ORIGIN + i)
            assert ins.kind == "branch" and ins.conditional
            assert ins.branch_target == ORIGIN

    def test_call_defines_link_register(self):
        ins = decode(assemble("bl 0x40", origin=0).code, 0)
        assert ins.kind == "call"
        assert ins.defs == {reg("x30")}
        ins = decode(assemble("blr x8").code, 0)
        assert ins.defs == {reg("x30")} and ins.uses == {reg("x8")}

    def test_adrp_page_math(self):
        code = assemble("lbl: adrp x8, lbl@page", origin=0x100004A00).code
        ins = decode(code, 0x100004A00)
        assert ins.immediate == 0x100004000
        assert ins.defs == {reg("x8")}

    def test_alignment_and_width_invariants(self):
        ins = decode(assemble("nop").code, ORIGIN)
        assert ins.ea % 4 == 0 and len(ins.bytes) == 4


class TestCfg:
    def test_straight_line_is_one_block(self):
        fn = fn_from_asm("mov x0, #1\nmov x1, #2\nret")
        assert len(fn.blocks) == 1
        assert fn.blocks[0].successors == []

    def test_single_cbz_makes_three_blocks(self):
        fn = fn_from_asm(
            """
            cbz x0, done
            mov x1, #1
            done:
            ret
            """
        )
        assert len(fn.blocks) == 3
        branch_block = fn.blocks[0]
        assert len(branch_block.successors) == 2
        assert sorted(branch_block.successors) == [ORIGIN + 4, ORIGIN + 8]

    def test_diamond(self):
        fn = fn_from_asm(
            """
            cbz x0, left
            mov x1, #1
            b join
            left:
            mov x1, #2
            join:
            ret
            """
        )
        assert len(fn.blocks) == 4
        preds = fn.predecessors()
        join = fn.blocks[-1].ea
        assert len(preds[join]) == 2

    def test_loop_back_edge(self):
        fn = fn_from_asm(
            """
            mov x0, #10
            loop:
            sub x0, x0, #1
            cbnz x0, loop
            ret
            """
        )
        loop_head = ORIGIN + 4
        tail = next(b for b in fn.blocks if b.instructions[-1].mnemonic == "cbnz")
        assert loop_head in tail.successors

    def test_branch_outside_range_has_no_successor(self):
        fn = fn_from_asm("cmp x0, #0\nb 0x100009000")
        last = fn.blocks[-1]
        assert last.successors == []

    def test_calls_do_not_end_blocks(self):
        fn = fn_from_asm("mov x0, #1\nbl 0x100009000\nmov x1, #2\nret")
        assert len(fn.blocks) == 1

    def test_instructions_partition_blocks(self):
        fn = fn_from_asm(
            """
            cbz x0, out
            mov x1, #5
            cbnz x1, out
            mov x2, #6
            out:
            ret
            """
        )
        seen = set()
        for b in fn.blocks:
            expect = b.ea
            for ins in b.instructions:
                assert ins.ea == expect
                assert ins.ea not in seen
                seen.add(ins.ea)
                expect += 4
        assert seen == {ORIGIN + 4 * i for i in range(len(seen))}
        for b in fn.blocks:
            for ins in b.instructions[:-1]:
                assert not ins.ends_block

    def test_empty_range_raises(self):
        s = Scaffold()
        s.raw_func("f", b"\xc0\x03\x5f\xd6")
        blob, manifest = s.build()
        image = parse_macho(blob)
        entry = manifest["functions"]["f"]
        with pytest.raises(EmptyRange):
            build_function(image, entry, entry)
        with pytest.raises(EmptyRange):
            build_function(image, 0x7000, 0x7004)

    def test_trailing_zero_padding_dropped(self):
        fn = fn_from_asm("mov x0, #1\nret\n.word 0\n.word 0")
        assert [i.asm for i in fn.instructions()] == ["mov x0, #1", "ret"]


@pytest.fixture(scope="module")
def strings_image():
    s = Scaffold()
    s.cstring("hello", "hello world")
    s.func(
        "pair_add",
        """
        adrp x8, cstr_hello@page
        add x8, x8, cstr_hello@pageoff
        ret
        """,
    )
    s.func(
        "pair_load",
        """
        adrp x9, cstr_hello@page
        ldr x9, [x9, cstr_hello@pageoff]
        ret
        """,
    )
    s.func(
        "clobbered",
        """
        adrp x8, cstr_hello@page
        mov x8, #0
        add x0, x8, #4
        ret
        """,
    )
    blob, manifest = s.build()
    return parse_macho(blob), manifest


class TestXrefFusion:
    def test_adrp_add_fuses(self, strings_image):
        image, manifest = strings_image
        entry = manifest["functions"]["pair_add"]
        fn = build_function(image, entry, entry + 12)
        add = fn.blocks[0].instructions[1]
        assert add.xref == manifest["labels"]["cstr_hello"]

    def test_adrp_ldr_fuses(self, strings_image):
        image, manifest = strings_image
        entry = manifest["functions"]["pair_load"]
        fn = build_function(image, entry, entry + 12)
        load = fn.blocks[0].instructions[1]
        # pageoff of a label in another section still lands on the label
        assert load.xref == manifest["labels"]["cstr_hello"]

    def test_clobber_breaks_fusion(self, strings_image):
        image, manifest = strings_image
        entry = manifest["functions"]["clobbered"]
        fn = build_function(image, entry, entry + 16)
        add = fn.blocks[0].instructions[2]
        assert add.xref is None


class TestUseDef:
    def test_linear_register_chain(self):
        fn = fn_from_asm("mov x8, #5\nmov x0, x8\nret")
        edges = compute_use_def(fn)
        assert (ORIGIN + 4, ORIGIN, reg("x8")) in edges

    def test_diamond_yields_two_defs(self):
        fn = fn_from_asm(
            """
            cbz x0, left
            mov x1, #1
            b join
            left:
            mov x1, #2
            join:
            mov x2, x1
            ret
            """
        )
        edges = compute_use_def(fn)
        defs_of_use = {d for (u, d, l) in edges if l == reg("x1")}
        assert defs_of_use == {ORIGIN + 4, ORIGIN + 12}

    def test_stack_slot_round_trip(self):
        fn = fn_from_asm("str x0, [sp, #16]\nldr x1, [sp, #16]\nret")
        edges = compute_use_def(fn)
        assert (ORIGIN + 4, ORIGIN, stack_slot(16)) in edges

    def test_frame_adjustment_tracks_slots(self):
        fn = fn_from_asm(
            """
            sub sp, sp, #32
            str x0, [sp, #16]
            add x9, sp, #16
            ldr x1, [sp, #16]
            ret
            """
        )
        edges = compute_use_def(fn)
        # slot named relative to the entry frame: -32 + 16
        assert (ORIGIN + 12, ORIGIN + 4, stack_slot(-16)) in edges

    def test_parameter_use_has_no_edge(self):
        fn = fn_from_asm("mov x0, x2\nret")
        edges = compute_use_def(fn)
        assert not any(l == reg("x2") for (_, _, l) in edges)

    def test_writeback_defines_base(self):
        fn = fn_from_asm("ldr x9, [x10, #8]!\nmov x0, x10\nret")
        edges = compute_use_def(fn)
        assert (ORIGIN + 4, ORIGIN, reg("x10")) in edges

    def test_redefinition_kills(self):
        fn = fn_from_asm("mov x1, #1\nmov x1, #2\nmov x0, x1\nret")
        edges = compute_use_def(fn)
        defs_of_use = {d for (u, d, l) in edges if u == ORIGIN + 8 and l == reg("x1")}
        assert defs_of_use == {ORIGIN + 4}

    @pytest.mark.parametrize(
        "source",
        [
            "mov x1, #1\nmov x2, x1\nmov x1, #3\nadd x3, x1, x2\nret",
            """
            cbz x0, a
            mov x1, #1
            str x1, [sp, #8]
            b j
            a:
            mov x1, #2
            str x1, [sp, #8]
            j:
            ldr x2, [sp, #8]
            mov x3, x1
            ret
            """,
            """
            mov x0, #4
            loop:
            sub x0, x0, #1
            str x0, [sp, #24]
            ldr x1, [sp, #24]
            cbnz x0, loop
            mov x2, x1
            ret
            """,
        ],
    )
    def test_matches_brute_force_oracle(self, source):
        fn = fn_from_asm(source)
        eff = compute_effects(fn)
        triples = [
            (
                ins.ea,
                {str(l) for l in eff.eff_defs[ins.ea]},
                {str(l) for l in eff.eff_uses[ins.ea]},
            )
            for ins in fn.instructions()
        ]
        oracle = reaching_defs_oracle(triples, instr_successors(fn), fn.entry_ea)
        got: dict[tuple[int, str], set[int]] = {}
        for use_ea, def_ea, loc in compute_use_def(fn):
            got.setdefault((use_ea, str(loc)), set()).add(def_ea)
        assert got == oracle


@pytest.fixture(scope="module")
def objc_image():
    s = Scaffold()
    s.stub("objc_msgSend")
    s.selref("length")
    s.selref("doWork")
    s.selref("helperValue")
    s.raw_func("impl_work", b"\xc0\x03\x5f\xd6")
    s.func(
        "direct_methname",
        """
        adrp x8, meth_length@page
        add x8, x8, meth_length@pageoff
        mov x1, x8
        nop
        ret
        """,
    )
    s.func(
        "via_selref",
        """
        adrp x1, sel_length@page
        ldr x1, [x1, sel_length@pageoff]
        nop
        ret
        """,
    )
    s.func(
        "diamond_sel",
        """
        cbz x0, other
        adrp x1, sel_doWork@page
        ldr x1, [x1, sel_doWork@pageoff]
        b use
        other:
        adrp x1, sel_helperValue@page
        ldr x1, [x1, sel_helperValue@pageoff]
        use:
        nop
        ret
        """,
    )
    s.func(
        "spill",
        """
        adrp x1, sel_length@page
        ldr x1, [x1, sel_length@pageoff]
        str x1, [sp, #8]
        mov x1, #0
        ldr x1, [sp, #8]
        nop
        ret
        """,
    )
    s.func(
        "copy_loop",
        """
        loop:
        mov x1, x2
        mov x2, x1
        cbnz x0, loop
        nop
        ret
        """,
    )
    s.func("returns_class", """
        adrp x0, classref_Worker@page
        ldr x0, [x0, classref_Worker@pageoff]
        ret
        """)
    s.func(
        "interproc",
        """
        bl returns_class
        nop
        ret
        """,
    )
    s.classref("Worker")
    s.add_class(ClassSpec(name="Worker", methods=[MethodSpec("doWork", "impl_work")]))
    blob, manifest = s.build()
    image = parse_macho(blob)
    return image, manifest, load_model(image)


class TestBacktrace:
    def test_x0_untouched_is_self_ref(self):
        fn = fn_from_asm("nop\nnop\nret")
        values = backtrace(fn, reg("x0"), ORIGIN + 8)
        assert values == {SELF_REF}

    def test_x1_untouched_is_own_selector(self):
        fn = fn_from_asm("nop\nret")
        assert backtrace(fn, reg("x1"), ORIGIN + 4) == {OWN_SELECTOR}

    def test_other_registers_unknown_at_entry(self):
        fn = fn_from_asm("nop\nret")
        assert backtrace(fn, reg("x4"), ORIGIN + 4) == {UNKNOWN}

    def test_trace_at_entry_instruction(self):
        fn = fn_from_asm("ret")
        assert backtrace(fn, reg("x0"), ORIGIN) == {SELF_REF}

    def _fn(self, image, manifest, name, n_instr, model=None):
        entry = manifest["functions"][name]
        return build_function(image, entry, entry + 4 * n_instr, model=model)

    def test_const_string_through_methname(self, objc_image):
        image, manifest, model = objc_image
        fn = self._fn(image, manifest, "direct_methname", 5)
        use = manifest["functions"]["direct_methname"] + 12
        assert backtrace(fn, reg("x1"), use, model) == {CONST_STRING("length")}

    def test_const_string_through_selref_slot(self, objc_image):
        image, manifest, model = objc_image
        fn = self._fn(image, manifest, "via_selref", 4)
        use = manifest["functions"]["via_selref"] + 8
        assert backtrace(fn, reg("x1"), use, model) == {CONST_STRING("length")}

    def test_diamond_unions_both_selectors(self, objc_image):
        image, manifest, model = objc_image
        fn = self._fn(image, manifest, "diamond_sel", 8)
        use = manifest["functions"]["diamond_sel"] + 4 * 7
        assert backtrace(fn, reg("x1"), use, model) == {
            CONST_STRING("doWork"),
            CONST_STRING("helperValue"),
        }

    def test_stack_spill_survives_clobber(self, objc_image):
        image, manifest, model = objc_image
        fn = self._fn(image, manifest, "spill", 7)
        use = manifest["functions"]["spill"] + 4 * 5
        assert backtrace(fn, reg("x1"), use, model) == {CONST_STRING("length")}

    def test_copy_loop_terminates(self, objc_image):
        image, manifest, model = objc_image
        fn = self._fn(image, manifest, "copy_loop", 5)
        use = manifest["functions"]["copy_loop"] + 12
        values = backtrace(fn, reg("x1"), use, model)
        assert UNKNOWN in values

    def test_interprocedural_return_value(self, objc_image):
        image, manifest, model = objc_image
        callee = self._fn(image, manifest, "returns_class", 3)
        fn = self._fn(image, manifest, "interproc", 3)
        table = {callee.entry_ea: callee}
        use = manifest["functions"]["interproc"] + 4
        values = backtrace(fn, reg("x0"), use, model, depth=2, functions=table)
        assert values == {CONST_STRING("Worker")}

    def test_depth_exhaustion_is_unknown(self, objc_image):
        image, manifest, model = objc_image
        callee = self._fn(image, manifest, "returns_class", 3)
        fn = self._fn(image, manifest, "interproc", 3)
        table = {callee.entry_ea: callee}
        use = manifest["functions"]["interproc"] + 4
        values = backtrace(fn, reg("x0"), use, model, depth=0, functions=table)
        assert values == {UNKNOWN}


@pytest.fixture(scope="module")
def call_image():
    s = Scaffold()
    s.stub("objc_msgSend")
    s.stub("malloc")
    s.selref("doWork")
    s.selref("baseOnly")
    s.raw_func("impl_work", b"\xc0\x03\x5f\xd6")
    s.raw_func("impl_base", b"\xc0\x03\x5f\xd6")
    s.raw_func("leaf", b"\xc0\x03\x5f\xd6")
    s.func(
        "direct_caller",
        """
        bl leaf
        bl stub_malloc
        ret
        """,
    )
    s.func(
        "msg_const",
        """
        adrp x0, classref_Worker@page
        ldr x0, [x0, classref_Worker@pageoff]
        adrp x1, sel_doWork@page
        ldr x1, [x1, sel_doWork@pageoff]
        bl stub_objc_msgSend
        ret
        """,
    )
    s.func(
        "msg_super",
        """
        adrp x0, classref_Sub@page
        ldr x0, [x0, classref_Sub@pageoff]
        adrp x1, sel_baseOnly@page
        ldr x1, [x1, sel_baseOnly@pageoff]
        bl stub_objc_msgSend
        ret
        """,
    )
    s.func(
        "method_body",
        """
        adrp x1, sel_doWork@page
        ldr x1, [x1, sel_doWork@pageoff]
        bl stub_objc_msgSend
        ret
        """,
    )
    s.func(
        "msg_unknown_receiver",
        """
        mov x0, x5
        adrp x1, sel_doWork@page
        ldr x1, [x1, sel_doWork@pageoff]
        bl stub_objc_msgSend
        ret
        """,
    )
    s.func(
        "tail_call",
        """
        adrp x0, classref_Worker@page
        ldr x0, [x0, classref_Worker@pageoff]
        adrp x1, sel_doWork@page
        ldr x1, [x1, sel_doWork@pageoff]
        b stub_objc_msgSend
        """,
    )
    s.classref("Worker")
    s.classref("Sub")
    s.add_class(
        ClassSpec(
            name="Worker",
            methods=[
                MethodSpec("doWork", "impl_work"),
                MethodSpec("otherThing", "method_body"),
            ],
        )
    )
    s.add_class(ClassSpec(name="Base", methods=[MethodSpec("baseOnly", "impl_base")]))
    s.add_class(ClassSpec(name="Sub", superclass="Base"))
    blob, manifest = s.build()
    image = parse_macho(blob)
    return image, manifest, load_model(image)


class TestDevirtualize:

    def _fn(self, image, manifest, name, n, model=None):
        entry = manifest["functions"][name]
        return build_function(image, entry, entry + 4 * n, model=model)

    def test_direct_and_external_calls(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "direct_caller", 3)
        sites = devirtualize(fn, model)
        by_ea = {c.caller_ea: c for c in sites}
        entry = manifest["functions"]["direct_caller"]
        assert by_ea[entry] == CallSite(
            entry, "in_image", manifest["functions"]["leaf"], "leaf"
        )
        assert by_ea[entry + 4] == CallSite(entry + 4, "external", None, "malloc")

    def test_constant_receiver_and_selector(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "msg_const", 6)
        sites = devirtualize(fn, model)
        call_ea = manifest["functions"]["msg_const"] + 16
        resolved = [c for c in sites if c.caller_ea == call_ea]
        assert resolved == [
            CallSite(
                call_ea,
                "in_image",
                manifest["functions"]["impl_work"],
                "-[Worker doWork]",
                selector="doWork",
            )
        ]

    def test_no_residual_msgsend_for_resolvable_site(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "msg_const", 6)
        sites = devirtualize(fn, model)
        assert not any(c.target_name == "objc_msgSend" for c in sites)

    def test_superclass_lookup(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "msg_super", 6)
        sites = devirtualize(fn, model)
        call_ea = manifest["functions"]["msg_super"] + 16
        hit = next(c for c in sites if c.caller_ea == call_ea)
        assert hit.target_ea == manifest["functions"]["impl_base"]
        assert hit.target_name == "-[Base baseOnly]"

    def test_self_ref_receiver_resolves_to_own_class(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "method_body", 4, model=model)
        assert fn.objc_class_name == "Worker"
        sites = devirtualize(fn, model)
        call_ea = manifest["functions"]["method_body"] + 8
        hit = next(c for c in sites if c.caller_ea == call_ea)
        assert hit.target_ea == manifest["functions"]["impl_work"]

    def test_unknown_receiver_keeps_selector_annotation(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "msg_unknown_receiver", 5)
        sites = devirtualize(fn, model)
        call_ea = manifest["functions"]["msg_unknown_receiver"] + 12
        hit = next(c for c in sites if c.caller_ea == call_ea)
        assert hit.kind == "external"
        assert hit.target_name == "objc_msgSend"
        assert hit.selector == "doWork"

    def test_tail_call_is_devirtualized(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "tail_call", 5)
        sites = devirtualize(fn, model)
        assert any(
            c.target_ea == manifest["functions"]["impl_work"] for c in sites
        )

    def test_method_name_from_model(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "impl_work", 1, model=model)
        assert fn.name == "-[Worker doWork]"

    def test_call_effects_for_use_def(self, call_image):
        image, manifest, model = call_image
        fn = self._fn(image, manifest, "msg_const", 6)
        sites = devirtualize(fn, model)
        effects = call_effects_from_sites(sites)
        call_ea = manifest["functions"]["msg_const"] + 16
        uses, defs = effects[call_ea]
        assert uses == {"x0", "x1"}
        assert defs == {"x0", "x30"}
        edges = compute_use_def(fn, effects)
        sel_def = manifest["functions"]["msg_const"] + 12
        assert (call_ea, sel_def, reg("x1")) in edges


class TestTextDisasm:
    def test_round_trip(self):
        fn = fn_from_asm("mov x0, #1\nadd x0, x0, #2\nret")
        text = format_text_disasm(list(fn.instructions()))
        assert text.splitlines()[0] == "#lios-disasm v1"
        parsed = parse_text_disasm(text)
        assert [(i.ea, i.bytes, i.asm) for i in parsed] == [
            (i.ea, i.bytes, i.asm) for i in fn.instructions()
        ]
        rebuilt = build_function_from_instructions(parsed, "f")
        assert [b.ea for b in rebuilt.blocks] == [b.ea for b in fn.blocks]

    def test_comments_and_blank_lines(self):
        text = "#lios-disasm v1\n# a comment\n\n100004000\t200080d2\tmov x0, #1\n"
        parsed = parse_text_disasm(text)
        assert len(parsed) == 1
        assert parsed[0].kind == "assignment"

    def test_missing_header(self):
        with pytest.raises(MalformedTextDisasm):
            parse_text_disasm("100004000\t200080d2\tmov x0, #1\n")

    def test_bad_lines(self):
        for body in (
            "zzz\t200080d2\tmov x0, #1",
            "100004000\t20\tmov x0, #1",
            "100004000\t200080d2",
            "100004002\t200080d2\tmov x0, #1",
        ):
            with pytest.raises(MalformedTextDisasm):
                parse_text_disasm(f"#lios-disasm v1\n{body}\n")

    def test_decoded_semantics_follow_bytes(self):
        # the asm column is display text; kinds come from the bytes
        text = "#lios-disasm v1\n0\tc0035fd6\tmy_ret_alias\n"
        parsed = parse_text_disasm(text)
        assert parsed[0].kind == "return"
        assert parsed[0].asm == "my_ret_alias"
