"""aarch64 subset decoder, CFG construction, use-def chains, devirtualization.

The decoder covers the instructions compilers emit around message dispatch
and control flow: moves, address formation, integer add/sub, loads/stores,
and branches.  Everything else decodes to an opaque `.word` that defines and
uses nothing, which keeps downstream analyses conservative but total.

Register-to-register dataflow is tracked per function with a light constant
and stack-offset propagation; stack slots addressed as sp/fp plus a constant
become first-class locations so spills don't break use-def chains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import EmptyRange, MalformedTextDisasm
from .macho import (
    MachoImage,
    read_cstring,
    read_u64,
    strip_pac,
    symbol_name_for_function,
    va_to_offset,
)

TEXT_DISASM_HEADER = "#lios-disasm v1"

RETURN_REG = "x0"
LINK_REG = "x30"


# ---------------------------------------------------------------------------
# locations and instructions


@dataclass(frozen=True)
class Loc:
    """A dataflow location: register, frame slot, or absolute memory."""

    kind: str  # "reg" | "stack" | "mem"
    value: object  # reg name, signed frame offset, or virtual address

    def __str__(self) -> str:
        if self.kind == "reg":
            return self.value
        if self.kind == "stack":
            return f"stack{self.value:+d}"
        return f"mem:{self.value:#x}"


def reg(name: str) -> Loc:
    return Loc("reg", name)


def stack_slot(offset: int) -> Loc:
    return Loc("stack", offset)


def mem(address: int) -> Loc:
    return Loc("mem", address)


@dataclass
class Instruction:
    ea: int
    bytes: bytes
    asm: str
    kind: str  # assignment | branch | call | return | compare | nop | other
    defs: set[Loc] = field(default_factory=set)
    uses: set[Loc] = field(default_factory=set)
    branch_target: int | None = None
    immediate: int | None = None
    xref: int | None = None
    # operand detail for the analyses
    mnemonic: str = ""
    rd: str | None = None
    rn: str | None = None
    rm: str | None = None
    rt2: str | None = None
    mem_base: str | None = None
    mem_offset: int = 0
    mem_mode: str = "off"  # off | pre | post
    is_load: bool = False
    is_store: bool = False
    conditional: bool = False
    sixty_four: bool = True
    hw_shift: int = 0  # movk chunk position

    @property
    def ends_block(self) -> bool:
        return self.kind in ("branch", "return")


def _xname(n: int) -> str:
    return f"x{n}"


def _print_reg(n: int, sixty_four: bool, sp_ok: bool = False) -> str:
    if n == 31:
        if sp_ok:
            return "sp"
        return "xzr" if sixty_four else "wzr"
    return f"{'x' if sixty_four else 'w'}{n}"


def _loc_for(n: int, sp_ok: bool = False) -> Loc | None:
    """Register 31 is sp in addressing contexts and the zero register elsewhere."""
    if n == 31:
        return reg("sp") if sp_ok else None
    return reg(_xname(n))


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


_COND_NAMES = [
    "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc",
    "hi", "ls", "ge", "lt", "gt", "le", "al", "nv",
]


def decode(word_bytes: bytes, ea: int) -> Instruction:
    """Decode one 4-byte word; unknown encodings become opaque `.word`s."""
    word = struct.unpack("<I", word_bytes)[0]
    ins = Instruction(ea=ea, bytes=bytes(word_bytes), asm="", kind="other")

    def opaque():
        ins.asm = f".word 0x{word:08x}"
        ins.mnemonic = ".word"
        return ins

    if word == 0xD503201F:
        ins.kind, ins.asm, ins.mnemonic = "nop", "nop", "nop"
        return ins

    if word & 0xFFFFFC1F == 0xD65F0000:  # RET
        rn = (word >> 5) & 0x1F
        ins.kind, ins.mnemonic = "return", "ret"
        ins.asm = "ret" if rn == 30 else f"ret x{rn}"
        ins.uses = {reg(_xname(rn))}
        return ins

    if word & 0xFFFFFC1F == 0xD61F0000:  # BR
        rn = (word >> 5) & 0x1F
        ins.kind, ins.mnemonic = "branch", "br"
        ins.rn = _xname(rn)
        ins.asm = f"br x{rn}"
        loc = _loc_for(rn)
        ins.uses = {loc} if loc else set()
        return ins

    if word & 0xFFFFFC1F == 0xD63F0000:  # BLR
        rn = (word >> 5) & 0x1F
        ins.kind, ins.mnemonic = "call", "blr"
        ins.rn = _xname(rn)
        ins.asm = f"blr x{rn}"
        loc = _loc_for(rn)
        ins.uses = {loc} if loc else set()
        ins.defs = {reg(LINK_REG)}
        return ins

    top6 = word >> 26
    if top6 in (0x05, 0x25):  # B / BL
        target = ea + 4 * _sext(word & 0x3FFFFFF, 26)
        ins.branch_target = target
        if top6 == 0x05:
            ins.kind, ins.mnemonic = "branch", "b"
            ins.asm = f"b 0x{target:x}"
        else:
            ins.kind, ins.mnemonic = "call", "bl"
            ins.asm = f"bl 0x{target:x}"
            ins.defs = {reg(LINK_REG)}
        return ins

    if word & 0xFF000010 == 0x54000000:  # B.cond
        cond = _COND_NAMES[word & 0xF]
        target = ea + 4 * _sext((word >> 5) & 0x7FFFF, 19)
        ins.kind, ins.mnemonic = "branch", f"b.{cond}"
        ins.conditional = True
        ins.branch_target = target
        ins.asm = f"b.{cond} 0x{target:x}"
        return ins

    if word & 0x7E000000 == 0x34000000:  # CBZ/CBNZ
        sixty_four = bool(word >> 31)
        nonzero = bool((word >> 24) & 1)
        rt = word & 0x1F
        target = ea + 4 * _sext((word >> 5) & 0x7FFFF, 19)
        name = "cbnz" if nonzero else "cbz"
        ins.kind, ins.mnemonic = "branch", name
        ins.conditional = True
        ins.branch_target = target
        ins.sixty_four = sixty_four
        ins.asm = f"{name} {_print_reg(rt, sixty_four)}, 0x{target:x}"
        loc = _loc_for(rt)
        ins.uses = {loc} if loc else set()
        return ins

    if word & 0x7E000000 == 0x36000000:  # TBZ/TBNZ
        bit = ((word >> 31) << 5) | ((word >> 19) & 0x1F)
        nonzero = bool((word >> 24) & 1)
        rt = word & 0x1F
        target = ea + 4 * _sext((word >> 5) & 0x3FFF, 14)
        name = "tbnz" if nonzero else "tbz"
        sixty_four = bit >= 32
        ins.kind, ins.mnemonic = "branch", name
        ins.conditional = True
        ins.branch_target = target
        ins.immediate = bit
        ins.sixty_four = sixty_four
        ins.asm = f"{name} {_print_reg(rt, sixty_four)}, #{bit}, 0x{target:x}"
        loc = _loc_for(rt)
        ins.uses = {loc} if loc else set()
        return ins

    if word & 0x9F000000 == 0x90000000:  # ADRP
        rd = word & 0x1F
        imm = _sext(((word >> 3) & 0x1FFFFC) | ((word >> 29) & 0x3), 21) << 12
        page = (ea & ~0xFFF) + imm
        ins.kind, ins.mnemonic = "assignment", "adrp"
        ins.rd = _xname(rd)
        ins.immediate = page
        ins.xref = page
        ins.asm = f"adrp x{rd}, 0x{page:x}"
        loc = _loc_for(rd)
        ins.defs = {loc} if loc else set()
        return ins

    if word & 0x9F000000 == 0x10000000:  # ADR
        rd = word & 0x1F
        imm = _sext(((word >> 3) & 0x1FFFFC) | ((word >> 29) & 0x3), 21)
        target = ea + imm
        ins.kind, ins.mnemonic = "assignment", "adr"
        ins.rd = _xname(rd)
        ins.immediate = target
        ins.xref = target
        ins.asm = f"adr x{rd}, 0x{target:x}"
        loc = _loc_for(rd)
        ins.defs = {loc} if loc else set()
        return ins

    if word & 0x1F800000 == 0x12800000:  # MOVN/MOVZ/MOVK
        opc = (word >> 29) & 0x3
        if opc == 1:
            return opaque()
        sixty_four = bool(word >> 31)
        hw = (word >> 21) & 0x3
        imm16 = (word >> 5) & 0xFFFF
        rd = word & 0x1F
        shift = 16 * hw
        ins.sixty_four = sixty_four
        ins.rd = _xname(rd)
        loc = _loc_for(rd)
        ins.defs = {loc} if loc else set()
        rd_text = _print_reg(rd, sixty_four)
        if opc == 3:  # MOVK: keeps other bits, so value alone is not the result
            ins.kind, ins.mnemonic = "assignment", "movk"
            if loc:
                ins.uses = {loc}
            ins.immediate = imm16
            ins.hw_shift = shift
            suffix = f", lsl #{shift}" if shift else ""
            ins.asm = f"movk {rd_text}, #{imm16}{suffix}"
            return ins
        value = imm16 << shift
        if opc == 0:  # MOVN
            mask = (1 << 64) - 1 if sixty_four else (1 << 32) - 1
            value = ~value & mask
        ins.kind, ins.mnemonic = "assignment", "mov"
        ins.immediate = value
        ins.asm = f"mov {rd_text}, #{value}"
        return ins

    if word & 0x7FE0FFE0 == 0x2A0003E0:  # ORR rd, xzr, rm (register move)
        sixty_four = bool(word >> 31)
        rm = (word >> 16) & 0x1F
        rd = word & 0x1F
        ins.kind, ins.mnemonic = "assignment", "mov"
        ins.sixty_four = sixty_four
        ins.rd = _xname(rd)
        ins.rm = _xname(rm)
        ins.asm = f"mov {_print_reg(rd, sixty_four)}, {_print_reg(rm, sixty_four)}"
        dloc, uloc = _loc_for(rd), _loc_for(rm)
        ins.defs = {dloc} if dloc else set()
        ins.uses = {uloc} if uloc else set()
        return ins

    if word & 0x1F800000 == 0x11000000:  # ADD/SUB immediate
        sixty_four = bool(word >> 31)
        is_sub = bool((word >> 30) & 1)
        sets_flags = bool((word >> 29) & 1)
        shifted = bool((word >> 22) & 1)
        raw12 = (word >> 10) & 0xFFF
        imm = raw12 << (12 if shifted else 0)
        rn = (word >> 5) & 0x1F
        rd = word & 0x1F
        ins.sixty_four = sixty_four
        ins.rn = "sp" if rn == 31 else _xname(rn)
        ins.immediate = imm
        uloc = _loc_for(rn, sp_ok=True)
        if sets_flags and rd == 31:  # CMP/CMN aliases
            name = "cmp" if is_sub else "cmn"
            ins.kind, ins.mnemonic = "compare", name
            ins.asm = f"{name} {_print_reg(rn, sixty_four, sp_ok=True)}, #{imm}"
            ins.uses = {uloc} if uloc else set()
            return ins
        name = ("subs" if is_sub else "adds") if sets_flags else ("sub" if is_sub else "add")
        ins.kind, ins.mnemonic = "assignment", name
        ins.rd = "sp" if rd == 31 else _xname(rd)
        suffix = ", lsl #12" if shifted else ""
        ins.asm = (
            f"{name} {_print_reg(rd, sixty_four, sp_ok=not sets_flags)}, "
            f"{_print_reg(rn, sixty_four, sp_ok=True)}, #{raw12}{suffix}"
        )
        dloc = _loc_for(rd, sp_ok=not sets_flags)
        ins.defs = {dloc} if dloc else set()
        ins.uses = {uloc} if uloc else set()
        return ins

    if word & 0x1F200000 == 0x0B000000:  # ADD/SUB shifted register
        sixty_four = bool(word >> 31)
        is_sub = bool((word >> 30) & 1)
        sets_flags = bool((word >> 29) & 1)
        rm = (word >> 16) & 0x1F
        imm6 = (word >> 10) & 0x3F
        rn = (word >> 5) & 0x1F
        rd = word & 0x1F
        shift_kind = ("lsl", "lsr", "asr", "ror")[(word >> 22) & 0x3]
        suffix = f", {shift_kind} #{imm6}" if imm6 else ""
        ins.sixty_four = sixty_four
        ins.rn = _xname(rn)
        ins.rm = _xname(rm)
        nloc, mloc = _loc_for(rn), _loc_for(rm)
        uses = {l for l in (nloc, mloc) if l}
        if sets_flags and rd == 31:
            name = "cmp" if is_sub else "cmn"
            ins.kind, ins.mnemonic = "compare", name
            ins.asm = (
                f"{name} {_print_reg(rn, sixty_four)}, "
                f"{_print_reg(rm, sixty_four)}{suffix}"
            )
            ins.uses = uses
            return ins
        name = ("subs" if is_sub else "adds") if sets_flags else ("sub" if is_sub else "add")
        ins.kind, ins.mnemonic = "assignment", name
        ins.rd = _xname(rd)
        ins.asm = (
            f"{name} {_print_reg(rd, sixty_four)}, {_print_reg(rn, sixty_four)}, "
            f"{_print_reg(rm, sixty_four)}{suffix}"
        )
        dloc = _loc_for(rd)
        ins.defs = {dloc} if dloc else set()
        ins.uses = uses
        return ins

    ldst = _decode_loadstore(word, ins)
    if ldst is not None:
        return ldst

    return opaque()


def _decode_loadstore(word: int, ins: Instruction) -> Instruction | None:
    # LDR/STR unsigned scaled offset
    hi = word & 0xFFC00000
    table = {
        0xF9400000: ("ldr", True, True),
        0xF9000000: ("str", False, True),
        0xB9400000: ("ldr", True, False),
        0xB9000000: ("str", False, False),
    }
    if hi in table:
        name, is_load, sixty_four = table[hi]
        scale = 3 if sixty_four else 2
        imm = ((word >> 10) & 0xFFF) << scale
        return _fill_loadstore(ins, name, is_load, sixty_four, word, imm, "off")

    # LDUR/STUR and pre/post-indexed LDR/STR (imm9 forms)
    if word & 0xFFE00000 in (0xF8400000, 0xF8000000, 0xB8400000, 0xB8000000):
        sixty_four = (word >> 30) & 0x3 == 0x3
        is_load = bool((word >> 22) & 1)
        mode_bits = (word >> 10) & 0x3
        imm = _sext((word >> 12) & 0x1FF, 9)
        if mode_bits == 0:
            name = "ldur" if is_load else "stur"
            return _fill_loadstore(ins, name, is_load, sixty_four, word, imm, "off")
        if mode_bits == 3:
            name = "ldr" if is_load else "str"
            return _fill_loadstore(ins, name, is_load, sixty_four, word, imm, "pre")
        if mode_bits == 1:
            name = "ldr" if is_load else "str"
            return _fill_loadstore(ins, name, is_load, sixty_four, word, imm, "post")
        return None

    # LDP/STP
    if (word >> 25) & 0x1F == 0x14:
        mode_bits = (word >> 23) & 0x3
        if mode_bits == 0:
            return None
        sixty_four = bool(word >> 31)
        is_load = bool((word >> 22) & 1)
        scale = 3 if sixty_four else 2
        imm = _sext((word >> 15) & 0x7F, 7) << scale
        rt2 = (word >> 10) & 0x1F
        rn = (word >> 5) & 0x1F
        rt = word & 0x1F
        name = "ldp" if is_load else "stp"
        mode = {1: "post", 2: "off", 3: "pre"}[mode_bits]
        ins.kind, ins.mnemonic = "assignment", name
        ins.sixty_four = sixty_four
        ins.is_load, ins.is_store = is_load, not is_load
        ins.rd = _xname(rt)
        ins.rt2 = _xname(rt2)
        ins.mem_base = "sp" if rn == 31 else _xname(rn)
        ins.mem_offset = imm
        ins.mem_mode = mode
        t1, t2 = _print_reg(rt, sixty_four), _print_reg(rt2, sixty_four)
        base = _print_reg(rn, True, sp_ok=True)
        if mode == "off":
            addr = f"[{base}, #{imm}]" if imm else f"[{base}]"
        elif mode == "pre":
            addr = f"[{base}, #{imm}]!"
        else:
            addr = f"[{base}], #{imm}"
        ins.asm = f"{name} {t1}, {t2}, {addr}"
        tlocs = {l for l in (_loc_for(rt), _loc_for(rt2)) if l}
        bloc = _loc_for(rn, sp_ok=True)
        if is_load:
            ins.defs = set(tlocs)
            ins.uses = {bloc} if bloc else set()
        else:
            ins.defs = set()
            ins.uses = tlocs | ({bloc} if bloc else set())
        if mode != "off" and bloc:
            ins.defs = ins.defs | {bloc}
        return ins
    return None


def _fill_loadstore(
    ins: Instruction,
    name: str,
    is_load: bool,
    sixty_four: bool,
    word: int,
    imm: int,
    mode: str,
) -> Instruction:
    rn = (word >> 5) & 0x1F
    rt = word & 0x1F
    ins.kind, ins.mnemonic = "assignment", name
    ins.sixty_four = sixty_four
    ins.is_load, ins.is_store = is_load, not is_load
    ins.rd = _xname(rt)
    ins.mem_base = "sp" if rn == 31 else _xname(rn)
    ins.mem_offset = imm
    ins.mem_mode = mode
    rt_text = _print_reg(rt, sixty_four)
    base = _print_reg(rn, True, sp_ok=True)
    if mode == "off":
        addr = f"[{base}, #{imm}]" if imm else f"[{base}]"
    elif mode == "pre":
        addr = f"[{base}, #{imm}]!"
    else:
        addr = f"[{base}], #{imm}"
    ins.asm = f"{name} {rt_text}, {addr}"
    tloc = _loc_for(rt)
    bloc = _loc_for(rn, sp_ok=True)
    if is_load:
        ins.defs = {tloc} if tloc else set()
        ins.uses = {bloc} if bloc else set()
    else:
        ins.defs = set()
        ins.uses = {l for l in (tloc, bloc) if l}
    if mode != "off" and bloc:
        ins.defs = ins.defs | {bloc}
    return ins


# ---------------------------------------------------------------------------
# CFG construction


@dataclass
class BasicBlock:
    ea: int
    instructions: list[Instruction]
    successors: list[int] = field(default_factory=list)

    @property
    def end(self) -> int:
        return self.instructions[-1].ea + 4


@dataclass
class FunctionBody:
    entry_ea: int
    name: str
    blocks: list[BasicBlock]
    end_ea: int
    use_def: set[tuple[int, int, Loc]] = field(default_factory=set)
    objc_class_name: str | None = None
    objc_selector: str | None = None
    objc_is_class_method: bool = False

    def block_at(self, ea: int) -> BasicBlock | None:
        for b in self.blocks:
            if b.ea == ea:
                return b
        return None

    def instruction_at(self, ea: int) -> Instruction | None:
        for b in self.blocks:
            if b.ea <= ea < b.end:
                return b.instructions[(ea - b.ea) // 4]
        return None

    def instructions(self):
        for b in self.blocks:
            yield from b.instructions

    def predecessors(self) -> dict[int, list[int]]:
        preds: dict[int, list[int]] = {b.ea: [] for b in self.blocks}
        for b in self.blocks:
            for s in b.successors:
                preds[s].append(b.ea)
        return preds


def build_function(
    image: MachoImage,
    entry_ea: int,
    end_ea: int,
    name: str | None = None,
    model=None,
) -> FunctionBody:
    """Decode [entry_ea, end_ea) and shape it into basic blocks."""
    if end_ea <= entry_ea:
        raise EmptyRange(f"function range [{entry_ea:#x}, {end_ea:#x}) is empty")
    offset = va_to_offset(image, entry_ea)
    if offset is None:
        raise EmptyRange(f"entry {entry_ea:#x} is not mapped")
    count = (end_ea - entry_ea) // 4
    instructions = [
        decode(image.data[offset + 4 * i : offset + 4 * i + 4], entry_ea + 4 * i)
        for i in range(count)
    ]
    while len(instructions) > 1 and instructions[-1].bytes == b"\x00\x00\x00\x00":
        instructions.pop()  # linker padding after the final return
    fn = _shape_blocks(entry_ea, instructions, name or "")
    _fuse_xrefs(fn)
    fn.name = name or _function_name(image, entry_ea, model, fn)
    if model is not None:
        hit = model.class_of_impl(entry_ea)
        if hit is not None:
            cls, method = hit
            fn.objc_class_name = cls.name
            fn.objc_selector = method.selector
            fn.objc_is_class_method = cls.is_metaclass
    return fn


def build_function_from_instructions(
    instructions: list[Instruction], name: str = ""
) -> FunctionBody:
    if not instructions:
        raise EmptyRange("no instructions")
    instructions = list(instructions)
    while len(instructions) > 1 and instructions[-1].bytes == b"\x00\x00\x00\x00":
        instructions.pop()
    fn = _shape_blocks(instructions[0].ea, instructions, name)
    _fuse_xrefs(fn)
    if not fn.name:
        fn.name = f"sub_{fn.entry_ea:x}"
    return fn


def _function_name(image: MachoImage, entry_ea: int, model, fn: FunctionBody) -> str:
    if model is not None:
        hit = model.class_of_impl(entry_ea)
        if hit is not None:
            cls, method = hit
            marker = "+" if cls.is_metaclass else "-"
            return f"{marker}[{cls.name} {method.selector}]"
    symbol = symbol_name_for_function(image, entry_ea)
    if symbol:
        return symbol
    return f"sub_{entry_ea:x}"


def _shape_blocks(entry_ea: int, instructions: list[Instruction], name: str) -> FunctionBody:
    end_ea = instructions[-1].ea + 4
    in_range = lambda ea: entry_ea <= ea < end_ea
    leaders = {entry_ea}
    for ins in instructions:
        if ins.ends_block:
            if ins.branch_target is not None and in_range(ins.branch_target):
                leaders.add(ins.branch_target)
            if ins.ea + 4 < end_ea:
                leaders.add(ins.ea + 4)

    blocks: list[BasicBlock] = []
    current: list[Instruction] = []
    for ins in instructions:
        if ins.ea in leaders and current:
            blocks.append(BasicBlock(current[0].ea, current))
            current = []
        current.append(ins)
    if current:
        blocks.append(BasicBlock(current[0].ea, current))

    starts = {b.ea for b in blocks}
    for b in blocks:
        last = b.instructions[-1]
        succ: list[int] = []
        if last.kind == "return":
            pass
        elif last.kind == "branch":
            target = last.branch_target
            if target is not None and in_range(target):
                succ.append(target)
            if last.conditional and last.ea + 4 < end_ea:
                succ.append(last.ea + 4)
        elif last.ea + 4 < end_ea:
            succ.append(last.ea + 4)  # fell into the next leader
        b.successors = sorted(s for s in set(succ) if s in starts)
    return FunctionBody(entry_ea=entry_ea, name=name, blocks=blocks, end_ea=end_ea)


def _fuse_xrefs(fn: FunctionBody) -> None:
    """Turn ADRP+ADD / ADRP+LDR pairs into an absolute xref on the second half."""
    for block in fn.blocks:
        page: dict[str, int] = {}
        for ins in block.instructions:
            if ins.mnemonic == "adrp":
                page[ins.rd] = ins.immediate
                continue
            if ins.kind == "call":
                page.clear()
                continue
            if (
                ins.mnemonic == "add"
                and ins.rm is None
                and ins.rn in page
                and ins.immediate is not None
            ):
                ins.xref = page[ins.rn] + ins.immediate
                page[ins.rd] = ins.xref
                continue
            if ins.is_load and ins.mem_base in page and ins.mem_mode == "off":
                ins.xref = page[ins.mem_base] + ins.mem_offset
            for d in ins.defs:
                if d.kind == "reg":
                    page.pop(d.value, None)


# ---------------------------------------------------------------------------
# effects: constant/stack tracking shared by use-def and backtrace

_SP = ("sp", 0)


@dataclass
class _Effects:
    """Per-instruction effective defs/uses and assignment provenance."""

    eff_defs: dict[int, set[Loc]]
    eff_uses: dict[int, set[Loc]]
    assign: dict[int, tuple]  # ea -> ("const", v) | ("copy", Loc) | ("load", Loc) | ("call",) | ("opaque",)


def _merge_states(states: list[dict]) -> dict:
    if not states:
        return {}
    out = dict(states[0])
    for other in states[1:]:
        for key in list(out):
            if other.get(key) != out[key]:
                del out[key]
    return out


def _value_after_add(value, imm: int, negate: bool):
    if value is None:
        return None
    kind, v = value
    return (kind, v - imm if negate else v + imm)


def compute_effects(fn: FunctionBody, call_effects: dict | None = None) -> _Effects:
    """Forward constant/stack-offset propagation to a fixpoint over the CFG."""
    call_effects = call_effects or {}
    preds = fn.predecessors()
    block_in: dict[int, dict] = {}
    block_out: dict[int, dict] = {}
    order = [b.ea for b in fn.blocks]

    def transfer(state: dict, ins: Instruction) -> dict:
        state = dict(state)
        m = ins.mnemonic
        if m == "mov" and ins.rm is not None:
            state[ins.rd] = state.get(ins.rm)
            if state[ins.rd] is None:
                state.pop(ins.rd, None)
        elif m == "mov":
            state[ins.rd] = ("const", ins.immediate)
        elif m in ("adrp", "adr"):
            state[ins.rd] = ("const", ins.immediate)
        elif m == "movk":
            prev = state.get(ins.rd)
            if prev is not None and prev[0] == "const":
                shift = ins.hw_shift
                state[ins.rd] = (
                    "const",
                    (prev[1] & ~(0xFFFF << shift)) | (ins.immediate << shift),
                )
            else:
                state.pop(ins.rd, None)
        elif m in ("add", "sub") and ins.rd is not None and ins.rm is None:
            value = _value_after_add(state.get(ins.rn), ins.immediate, m == "sub")
            if value is None:
                state.pop(ins.rd, None)
            else:
                state[ins.rd] = value
        elif ins.kind == "call":
            effect = call_effects.get(ins.ea)
            clobbered = effect[1] if effect else {RETURN_REG, LINK_REG}
            for r in clobbered:
                state.pop(r, None)
        elif ins.mem_mode in ("pre", "post") and ins.mem_base is not None:
            value = _value_after_add(state.get(ins.mem_base), ins.mem_offset, False)
            if value is None:
                state.pop(ins.mem_base, None)
            else:
                state[ins.mem_base] = value
            for d in ins.defs:
                if d.kind == "reg" and d.value != ins.mem_base:
                    state.pop(d.value, None)
            return state
        else:
            for d in ins.defs:
                if d.kind == "reg":
                    state.pop(d.value, None)
        return state

    changed = True
    rounds = 0
    while changed and rounds < len(fn.blocks) + 8:
        changed = False
        rounds += 1
        for ea in order:
            block = fn.block_at(ea)
            if ea == fn.entry_ea:
                state = {"sp": _SP}
            else:
                incoming = [block_out[p] for p in preds[ea] if p in block_out]
                state = _merge_states(incoming)
            if block_in.get(ea) != state:
                block_in[ea] = dict(state)
            for ins in block.instructions:
                state = transfer(state, ins)
            if block_out.get(ea) != state:
                block_out[ea] = state
                changed = True

    eff_defs: dict[int, set[Loc]] = {}
    eff_uses: dict[int, set[Loc]] = {}
    assign: dict[int, tuple] = {}

    def slot_for(state: dict, base: str, offset: int) -> Loc | None:
        value = state.get(base)
        if value is None:
            return None
        kind, v = value
        if kind == "sp":
            return stack_slot(v + offset)
        return mem(v + offset)

    for block in fn.blocks:
        state = dict(block_in.get(block.ea, {}))
        for ins in block.instructions:
            defs = set(ins.defs)
            uses = set(ins.uses)
            m = ins.mnemonic
            if ins.kind == "call":
                effect = call_effects.get(ins.ea)
                if effect:
                    uses |= {reg(r) for r in effect[0]}
                    defs |= {reg(r) for r in effect[1]}
                else:
                    uses |= {reg(RETURN_REG)}
                    defs |= {reg(RETURN_REG)}
                assign[ins.ea] = ("call",)
            elif ins.is_load or ins.is_store:
                pivot = ins.mem_offset if ins.mem_mode != "post" else 0
                slot = slot_for(state, ins.mem_base, pivot)
                slots = []
                if slot is not None:
                    slots.append(slot)
                    if ins.rt2 is not None:
                        width = 8 if ins.sixty_four else 4
                        second = (
                            stack_slot(slot.value + width)
                            if slot.kind == "stack"
                            else mem(slot.value + width)
                        )
                        slots.append(second)
                if ins.is_load:
                    uses |= set(slots)
                    if slot is not None and ins.rt2 is None:
                        assign[ins.ea] = ("load", slot)
                    else:
                        assign[ins.ea] = ("opaque",)
                else:
                    defs |= set(slots)
            elif m == "mov" and ins.rm is not None:
                assign[ins.ea] = ("copy", reg(ins.rm))
            elif m == "mov" or m in ("adrp", "adr"):
                assign[ins.ea] = ("const", ins.immediate)
            elif m in ("add", "sub") and ins.rd is not None and ins.rm is None:
                value = state.get(ins.rn)
                folded = _value_after_add(value, ins.immediate, m == "sub")
                if folded is not None and folded[0] == "const":
                    assign[ins.ea] = ("const", folded[1])
                elif ins.immediate == 0:
                    assign[ins.ea] = ("copy", reg(ins.rn) if ins.rn != "sp" else reg("sp"))
                else:
                    assign[ins.ea] = ("opaque",)
            elif defs:
                assign[ins.ea] = ("opaque",)
            eff_defs[ins.ea] = defs
            eff_uses[ins.ea] = uses
            state = transfer(state, ins)
    return _Effects(eff_defs, eff_uses, assign)


# ---------------------------------------------------------------------------
# reaching definitions / use-def chains


def compute_use_def(
    fn: FunctionBody, call_effects: dict | None = None
) -> set[tuple[int, int, Loc]]:
    """Reaching-definitions edges (use ea, def ea, location) over the CFG."""
    eff = compute_effects(fn, call_effects)
    preds = fn.predecessors()

    gen: dict[int, dict[Loc, set[int]]] = {}
    for block in fn.blocks:
        current: dict[Loc, set[int]] = {}
        for ins in block.instructions:
            for loc in eff.eff_defs[ins.ea]:
                current[loc] = {ins.ea}
        gen[block.ea] = current

    block_in: dict[int, dict[Loc, frozenset[int]]] = {b.ea: {} for b in fn.blocks}
    block_out: dict[int, dict[Loc, frozenset[int]]] = {b.ea: {} for b in fn.blocks}
    changed = True
    while changed:
        changed = False
        for block in fn.blocks:
            merged: dict[Loc, set[int]] = {}
            for p in preds[block.ea]:
                for loc, eas in block_out[p].items():
                    merged.setdefault(loc, set()).update(eas)
            new_in = {loc: frozenset(eas) for loc, eas in merged.items()}
            block_in[block.ea] = new_in
            out = {loc: set(eas) for loc, eas in new_in.items()}
            for loc, eas in gen[block.ea].items():
                out[loc] = set(eas)
            new_out = {loc: frozenset(eas) for loc, eas in out.items()}
            if new_out != block_out[block.ea]:
                block_out[block.ea] = new_out
                changed = True

    edges: set[tuple[int, int, Loc]] = set()
    for block in fn.blocks:
        reaching: dict[Loc, set[int]] = {
            loc: set(eas) for loc, eas in block_in[block.ea].items()
        }
        for ins in block.instructions:
            for loc in eff.eff_uses[ins.ea]:
                for def_ea in reaching.get(loc, ()):
                    edges.add((ins.ea, def_ea, loc))
            for loc in eff.eff_defs[ins.ea]:
                reaching[loc] = {ins.ea}
    fn.use_def = edges
    return edges


# ---------------------------------------------------------------------------
# backtracing (receiver/selector reconstruction)


@dataclass(frozen=True)
class ResolvedValue:
    variant: str  # const_string | self_ref | own_selector | composed | unknown
    text: str | None = None
    receiver: "ResolvedValue | None" = None
    selector: "ResolvedValue | None" = None

    def __str__(self) -> str:
        if self.variant == "const_string":
            return f"ConstString({self.text!r})"
        if self.variant == "composed":
            return f"Composed({self.receiver}, {self.selector})"
        return {"self_ref": "SelfRef", "own_selector": "OwnSelector"}.get(
            self.variant, "Unknown"
        )


CONST_STRING = lambda text: ResolvedValue("const_string", text=text)
SELF_REF = ResolvedValue("self_ref")
OWN_SELECTOR = ResolvedValue("own_selector")
UNKNOWN = ResolvedValue("unknown")


def composed(receiver: ResolvedValue, selector: ResolvedValue) -> ResolvedValue:
    return ResolvedValue("composed", receiver=receiver, selector=selector)


def _resolve_memory(model, address: int) -> ResolvedValue | None:
    """A constant address into objc metadata or string sections, as text."""
    if model is None or model.image is None:
        return None
    image = model.image
    if model.selmap is not None:
        sel = model.selmap.by_selref_address.get(address)
        if sel is not None:
            return CONST_STRING(sel)
    cls = model.by_address.get(address)
    if cls is not None:
        return CONST_STRING(cls.name)
    for sect_name in ("__objc_methname", "__cstring", "__objc_classname"):
        sect = image.section("__TEXT", sect_name)
        if sect is not None and sect.contains_va(address):
            text = read_cstring(image, address)
            if text is not None:
                return CONST_STRING(text)
    bound = image.bind_map.get(address)
    if bound is not None:
        return CONST_STRING(_strip_objc_symbol(bound))
    return None


def _deref_slot(model, address: int) -> ResolvedValue | None:
    """Follow one pointer (classref/selref-style slot) and resolve the target."""
    if model is None or model.image is None:
        return None
    direct = _resolve_memory(model, address)
    if direct is not None:
        return direct
    pointer = read_u64(model.image, address)
    if pointer is None:
        return None
    pointer = strip_pac(pointer)
    if pointer:
        return _resolve_memory(model, pointer)
    return None


def resolve_constant(model, address: int) -> ResolvedValue | None:
    """Public lookup of an address against metadata and string sections."""
    if model is None:
        return None
    direct = _resolve_memory(model, address)
    if direct is not None:
        return direct
    return _deref_slot(model, address)


def _strip_objc_symbol(symbol: str) -> str:
    for prefix in ("_OBJC_CLASS_$_", "_OBJC_METACLASS_$_"):
        if symbol.startswith(prefix):
            return symbol[len(prefix) :]
    return symbol.lstrip("_")


def backtrace(
    fn: FunctionBody,
    location: Loc,
    addr: int,
    model=None,
    depth: int = 2,
    functions: dict[int, FunctionBody] | None = None,
    _effects: _Effects | None = None,
) -> set[ResolvedValue]:
    """Possible values of `location` immediately before `addr` executes."""
    eff = _effects if _effects is not None else compute_effects(fn)
    preds = fn.predecessors()
    entry_ins_ea = fn.blocks[0].instructions[0].ea

    def positions_before(ea: int) -> list[int]:
        block = next(b for b in fn.blocks if b.ea <= ea < b.end)
        if ea != block.ea:
            return [ea - 4]
        return [fn.block_at(p).instructions[-1].ea for p in preds[block.ea]]

    def at_entry_value(loc: Loc) -> ResolvedValue:
        if loc == reg("x0"):
            return SELF_REF
        if loc == reg("x1"):
            return OWN_SELECTOR
        return UNKNOWN

    results: set[ResolvedValue] = set()
    visited: set[tuple[Loc, int]] = set()
    if addr == entry_ins_ea:
        return {at_entry_value(location)}
    work = [(location, p) for p in positions_before(addr)]

    def push_before(loc: Loc, ea: int) -> None:
        """Keep tracing `loc` from just before the instruction at `ea`."""
        if ea == entry_ins_ea:
            results.add(at_entry_value(loc))
            return
        for p in positions_before(ea):
            work.append((loc, p))

    while work:
        loc, ea = work.pop()
        if (loc, ea) in visited:
            continue
        visited.add((loc, ea))
        ins = fn.instruction_at(ea)
        if ins is None:
            results.add(UNKNOWN)
            continue
        if loc in eff.eff_defs.get(ea, ()):
            if ins.is_store and loc.kind in ("stack", "mem"):
                source = ins.rd
                if ins.rt2 is not None and _is_second_slot(eff, ins, loc):
                    source = ins.rt2
                if source is not None:
                    push_before(reg(source), ea)
                else:
                    results.add(UNKNOWN)
                continue
            info = eff.assign.get(ea, ("opaque",))
            if info[0] == "const":
                resolved = _resolve_memory(model, info[1]) if info[1] else None
                results.add(resolved if resolved is not None else UNKNOWN)
            elif info[0] == "load":
                target = info[1]
                if target.kind == "mem":
                    resolved = _deref_slot(model, target.value)
                    results.add(resolved if resolved is not None else UNKNOWN)
                else:
                    push_before(target, ea)
            elif info[0] == "copy":
                push_before(info[1], ea)
            elif info[0] == "call" and loc == reg(RETURN_REG):
                results |= _trace_through_call(fn, ins, model, depth, functions, eff)
            else:
                results.add(UNKNOWN)
            continue
        if ea == entry_ins_ea:
            results.add(at_entry_value(loc))
            continue
        for p in positions_before(ea):
            work.append((loc, p))
    return results or {UNKNOWN}


def _is_second_slot(eff: _Effects, ins: Instruction, loc: Loc) -> bool:
    """For a store-pair, whether `loc` is the slot holding the second register."""
    slots = sorted(
        (d for d in eff.eff_defs[ins.ea] if d.kind == loc.kind and d.kind != "reg"),
        key=lambda d: d.value,
    )
    return len(slots) == 2 and loc == slots[1]


def _trace_through_call(fn, ins, model, depth, functions, eff):
    if depth <= 0:
        return {UNKNOWN}
    target = ins.branch_target
    name = None
    if functions is not None and target in functions:
        callee = functions[target]
        returns = [
            i.ea for i in callee.instructions() if i.kind == "return"
        ]
        out: set[ResolvedValue] = set()
        for ret_ea in returns:
            out |= backtrace(
                callee, reg(RETURN_REG), ret_ea, model, depth - 1, functions
            )
        return out or {UNKNOWN}
    if model is not None and model.image is not None and target is not None:
        name = _stub_name(model.image, target)
    if name is not None and name.startswith("objc_msgSend"):
        receivers = backtrace(
            fn, reg("x0"), ins.ea, model, depth - 1, functions, _effects=eff
        )
        selectors = backtrace(
            fn, reg("x1"), ins.ea, model, depth - 1, functions, _effects=eff
        )
        return {composed(r, s) for r in receivers for s in selectors}
    return {UNKNOWN}


# ---------------------------------------------------------------------------
# call-site devirtualization


@dataclass(frozen=True)
class CallSite:
    caller_ea: int
    kind: str  # "in_image" | "external"
    target_ea: int | None
    target_name: str
    selector: str | None = None
    # receiver class name, kept as an annotation when the dispatch stays
    # external (e.g. `invoke` on an NSInvocation built in-function)
    receiver: str | None = None


def _stub_name(image: MachoImage, target: int) -> str | None:
    """Imported-symbol name for a call landing in `__stubs`, if any."""
    stubs = image.section("__TEXT", "__stubs")
    if stubs is None or not stubs.contains_va(target):
        return None
    stride = stubs.reserved2 or 4
    index = (target - stubs.vm_addr) // stride
    table_index = stubs.reserved1 + index
    if 0 <= table_index < len(image.indirect_symbols):
        sym_index = image.indirect_symbols[table_index]
        if 0 <= sym_index < len(image.symbols):
            name = image.symbols[sym_index].name
            if name:
                return name.lstrip("_") or name
    return f"stub_{target:x}"


def _flatten_receiver(value: ResolvedValue) -> ResolvedValue:
    """Unwrap constructor chains down to the class they instantiate.

    alloc/new/init... return an instance of the receiver's class, and by
    Cocoa convention so do `...With...:` class factories
    (`invocationWithMethodSignature:`, `stringWithFormat:`).
    """
    while value.variant == "composed":
        sel = value.selector
        if sel is None or sel.variant != "const_string":
            return value
        if (
            sel.text in ("alloc", "new")
            or sel.text.startswith("init")
            or "With" in sel.text
        ):
            value = value.receiver
        else:
            return value
    return value


def devirtualize(
    fn: FunctionBody,
    model=None,
    selmap=None,
    functions: dict[int, FunctionBody] | None = None,
    depth: int = 2,
) -> list[CallSite]:
    """Resolve direct calls, stubs, and objc_msgSend dispatches to targets."""
    image = model.image if model is not None else None
    if selmap is None and model is not None:
        selmap = model.selmap
    sites: list[CallSite] = []
    for ins in fn.instructions():
        target = ins.branch_target
        if ins.kind == "call" and ins.mnemonic == "bl":
            pass
        elif ins.kind == "branch" and not ins.conditional and target is not None:
            if fn.entry_ea <= target < fn.end_ea:
                continue  # ordinary jump, not a tail call
        else:
            continue
        if target is None:
            continue
        stub = _stub_name(image, target) if image is not None else None
        if stub is None:
            name = None
            if image is not None:
                name = symbol_name_for_function(image, target)
            if name is None and functions is not None and target in functions:
                name = functions[target].name
            sites.append(
                CallSite(ins.ea, "in_image", target, name or f"sub_{target:x}")
            )
            continue
        if stub.startswith("objc_msgSend"):
            sites.extend(_resolve_msgsend(fn, ins, model, depth, functions))
        else:
            sites.append(CallSite(ins.ea, "external", None, stub))
    return sites


def _resolve_msgsend(fn, ins, model, depth, functions) -> list[CallSite]:
    receivers = backtrace(fn, reg("x0"), ins.ea, model, depth, functions)
    selectors = backtrace(fn, reg("x1"), ins.ea, model, depth, functions)

    def selector_text(value: ResolvedValue) -> str | None:
        if value.variant == "const_string":
            return value.text
        if value.variant == "own_selector":
            return fn.objc_selector
        return None

    def receiver_class(value: ResolvedValue) -> str | None:
        value = _flatten_receiver(value)
        if value.variant == "const_string":
            return value.text
        if value.variant == "self_ref":
            return fn.objc_class_name
        return None

    sites: list[CallSite] = []
    seen_selectors = set()
    seen_receivers = set()
    for r in receivers:
        for s in selectors:
            sel = selector_text(s)
            cls_name = receiver_class(r)
            if sel is not None:
                seen_selectors.add(sel)
            if cls_name is not None:
                seen_receivers.add(cls_name)
            if sel is None or cls_name is None or model is None:
                continue
            hit = model.lookup(cls_name, sel)
            if hit is None:
                continue
            cls, method = hit
            if method.impl_address is None:
                continue
            marker = "+" if cls.is_metaclass else "-"
            sites.append(
                CallSite(
                    ins.ea,
                    "in_image",
                    method.impl_address,
                    f"{marker}[{cls.name} {sel}]",
                    selector=sel,
                )
            )
    if not sites:
        sites.append(
            CallSite(
                ins.ea,
                "external",
                None,
                "objc_msgSend",
                selector=min(seen_selectors) if seen_selectors else None,
                receiver=min(seen_receivers) if seen_receivers else None,
            )
        )
    return _dedup(sites)


def _dedup(sites: list[CallSite]) -> list[CallSite]:
    seen = set()
    out = []
    for s in sites:
        key = (s.caller_ea, s.kind, s.target_ea, s.target_name, s.selector, s.receiver)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


def call_effects_from_sites(sites: list[CallSite]) -> dict[int, tuple[set, set]]:
    """Per-call-site argument/clobber registers for use-def construction."""
    effects: dict[int, tuple[set, set]] = {}
    for s in sites:
        uses = {"x0"}
        if s.selector is not None or s.target_name.startswith("objc_msgSend"):
            uses = {"x0", "x1"}
            if s.selector:
                uses |= {f"x{2 + i}" for i in range(s.selector.count(":"))}
        prior = effects.get(s.caller_ea)
        if prior:
            uses |= prior[0]
        effects[s.caller_ea] = (uses, {RETURN_REG, LINK_REG})
    return effects


# ---------------------------------------------------------------------------
# textual-disassembly ingestion


def parse_text_disasm(text: str) -> list[Instruction]:
    """Ingest `#lios-disasm v1` lines of `ea<TAB>hexbytes<TAB>asm`."""
    lines = text.splitlines()
    stripped = [l for l in lines if l.strip()]
    if not stripped or stripped[0].strip() != TEXT_DISASM_HEADER:
        raise MalformedTextDisasm(f"missing `{TEXT_DISASM_HEADER}` header line")
    out: list[Instruction] = []
    for number, line in enumerate(lines, 1):
        # only whole-line comments: asm text carries `#` immediates
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip().split("\t")
        if len(parts) != 3:
            raise MalformedTextDisasm(
                f"line {number}: expected ea<TAB>hexbytes<TAB>asm"
            )
        ea_text, hex_text, asm_text = parts
        try:
            ea = int(ea_text, 16)
            raw = bytes.fromhex(hex_text)
        except ValueError as exc:
            raise MalformedTextDisasm(f"line {number}: {exc}") from exc
        if len(raw) != 4:
            raise MalformedTextDisasm(f"line {number}: instructions are 4 bytes")
        if ea % 4:
            raise MalformedTextDisasm(f"line {number}: ea {ea:#x} is not 4-aligned")
        ins = decode(raw, ea)
        provided = asm_text.strip()
        if provided:
            ins.asm = provided
        out.append(ins)
    if not out:
        raise MalformedTextDisasm("no instruction lines")
    return out


def format_text_disasm(instructions: list[Instruction]) -> str:
    lines = [TEXT_DISASM_HEADER]
    for ins in instructions:
        lines.append(f"{ins.ea:x}\t{ins.bytes.hex()}\t{ins.asm}")
    return "\n".join(lines) + "\n"
