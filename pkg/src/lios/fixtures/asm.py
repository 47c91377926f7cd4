"""A tiny arm64 assembler for fixture generation.

Supports exactly the instruction subset the analysis decoder understands,
assembled straight from the architecture manual's bit layouts.  Local labels
resolve to pc-relative offsets at assemble time; references to external
labels (other functions, data sections) come back as relocations for the
Mach-O builder to patch once addresses are final.

Syntax, one instruction per line, `;` or `//` comments:

    entry:
        stp x29, x30, [sp, #-16]!
        adrp x8, sel_length@page
        add x8, x8, sel_length@pageoff
        mov x1, x8
        bl stub_objc_msgSend
        cbz x0, done
        b.eq entry
    done:
        ldp x29, x30, [sp], #16
        ret
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

from .builder import Reloc


class AsmError(ValueError):
    pass


@dataclass
class AsmResult:
    code: bytes
    relocs: list[Reloc]
    labels: dict[str, int]  # label name -> byte offset within `code`


_COND = {
    "eq": 0, "ne": 1, "cs": 2, "hs": 2, "cc": 3, "lo": 3, "mi": 4, "pl": 5,
    "vs": 6, "vc": 7, "hi": 8, "ls": 9, "ge": 10, "lt": 11, "gt": 12, "le": 13,
}

_REG_ALIAS = {"fp": 29, "lr": 30}


def _reg(token: str, allow_sp=False, allow_zr=False) -> tuple[int, bool]:
    """Parse a register token; returns (number, is_64bit). sp and zr are 31."""
    t = token.lower()
    if t in _REG_ALIAS:
        return _REG_ALIAS[t], True
    if t == "sp":
        if not allow_sp:
            raise AsmError("sp not valid here")
        return 31, True
    if t in ("xzr", "wzr"):
        if not allow_zr:
            raise AsmError("zero register not valid here")
        return 31, t == "xzr"
    m = re.fullmatch(r"([xw])(\d{1,2})", t)
    if not m or int(m.group(2)) > 30:
        raise AsmError(f"bad register {token!r}")
    return int(m.group(2)), m.group(1) == "x"


def _imm(token: str) -> int:
    t = token.strip()
    if t.startswith("#"):
        t = t[1:]
    try:
        return int(t, 0)
    except ValueError as exc:
        raise AsmError(f"bad immediate {token!r}") from exc


_MEM = re.compile(
    r"\[\s*(?P<base>\w+)\s*(?:,\s*(?P<off>[^\]]+?)\s*)?\]\s*(?P<pre>!)?\s*(?:,\s*(?P<post>#?-?\w+))?$"
)


def assemble(source: str, origin: int = 0) -> AsmResult:
    # first pass: strip comments, collect labels and instruction lines
    lines: list[tuple[str, int]] = []
    labels: dict[str, int] = {}
    pc = 0
    for raw in source.splitlines():
        line = re.split(r";|//", raw, 1)[0].strip()
        if not line:
            continue
        while True:
            m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", line)
            if not m:
                break
            labels[m.group(1)] = pc
            line = m.group(2).strip()
        if line:
            lines.append((line, pc))
            pc += 4

    code = bytearray()
    relocs: list[Reloc] = []
    for line, pc in lines:
        word = _encode(line, pc, labels, relocs)
        code += struct.pack("<I", word)
    return AsmResult(bytes(code), relocs, labels)


def _split_operands(rest: str) -> list[str]:
    """Split on commas not inside brackets."""
    parts, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def _branch_target(token: str, pc: int, labels, relocs, kind: str) -> int:
    """Immediate for a pc-relative branch; 0 plus a reloc for external labels."""
    t = token.strip()
    if re.fullmatch(r"#?-?(0x)?[0-9a-fA-F]+", t) and not t[0].isalpha():
        target = _imm(t)
        delta = target - pc if not t.startswith("#") else target
        return delta
    if t in labels:
        return labels[t] - pc
    relocs.append(Reloc(pc, kind, t))
    return 0


def _fit_signed(value: int, bits: int, what: str) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if not lo <= value <= hi:
        raise AsmError(f"{what} {value} out of signed {bits}-bit range")
    return value & ((1 << bits) - 1)


def _encode(line: str, pc: int, labels: dict, relocs: list[Reloc]) -> int:
    parts = line.split(None, 1)
    mnem = parts[0].lower()
    rest = parts[1] if len(parts) > 1 else ""
    ops = _split_operands(rest)

    if mnem == "nop":
        return 0xD503201F
    if mnem == "ret":
        return 0xD65F03C0
    if mnem == ".word":
        return _imm(ops[0]) & 0xFFFFFFFF

    if mnem in ("movz", "movk", "movn", "mov"):
        return _enc_mov(mnem, ops)
    if mnem in ("adrp", "adr"):
        return _enc_adr(mnem, ops, pc, labels, relocs)
    if mnem in ("add", "sub", "adds", "subs", "cmp", "cmn"):
        return _enc_addsub(mnem, ops, relocs, pc)
    if mnem in ("ldr", "str", "ldur", "stur"):
        return _enc_loadstore(mnem, ops, relocs, pc)
    if mnem in ("ldp", "stp"):
        return _enc_pair(mnem, ops)
    if mnem == "b" or mnem.startswith("b."):
        return _enc_branch(mnem, ops, pc, labels, relocs)
    if mnem == "bl":
        imm = _branch_target(ops[0], pc, labels, relocs, "branch26")
        return 0x94000000 | ((imm >> 2) & 0x3FFFFFF)
    if mnem in ("br", "blr"):
        rn, _ = _reg(ops[0])
        return (0xD61F0000 if mnem == "br" else 0xD63F0000) | rn << 5
    if mnem in ("cbz", "cbnz"):
        rt, is64 = _reg(ops[0], allow_zr=True)
        imm = _branch_target(ops[1], pc, labels, relocs, "cond19")
        base = 0xB4000000 if mnem == "cbz" else 0xB5000000
        if is64:
            base |= 1 << 31
        else:
            base &= 0x7FFFFFFF
        return base | (_fit_signed(imm >> 2, 19, "branch offset") << 5) | rt
    if mnem in ("tbz", "tbnz"):
        rt, _ = _reg(ops[0], allow_zr=True)
        bit = _imm(ops[1])
        imm = _branch_target(ops[2], pc, labels, relocs, "cond14")
        base = 0x36000000 if mnem == "tbz" else 0x37000000
        if bit > 63:
            raise AsmError("tbz bit > 63")
        return (
            base
            | ((bit >> 5) << 31)
            | ((bit & 0x1F) << 19)
            | (_fit_signed(imm >> 2, 14, "branch offset") << 5)
            | rt
        )
    raise AsmError(f"unknown mnemonic {mnem!r}")


def _enc_mov(mnem: str, ops: list[str]) -> int:
    rd, is64 = _reg(ops[0], allow_zr=False)
    sf = 1 << 31 if is64 else 0
    if mnem == "mov" and not ops[1].lstrip().startswith("#"):
        rm, _ = _reg(ops[1], allow_zr=True)
        return 0x2A0003E0 | sf | rm << 16 | rd  # ORR rd, zr, rm
    value = _imm(ops[1])
    shift = 0
    if len(ops) == 3:
        m = re.fullmatch(r"lsl\s+#?(\d+)", ops[2].strip(), re.I)
        if not m:
            raise AsmError(f"bad shift {ops[2]!r}")
        shift = int(m.group(1))
        if shift % 16 or shift > (48 if is64 else 16):
            raise AsmError(f"mov shift {shift} invalid")
    if mnem == "mov":
        if not 0 <= value <= 0xFFFF:
            raise AsmError("mov immediate must fit 16 bits; use movz/movk")
        mnem = "movz"
    if not 0 <= value <= 0xFFFF:
        raise AsmError("move immediate out of 16-bit range")
    opc = {"movn": 0x12800000, "movz": 0x52800000, "movk": 0x72800000}[mnem]
    return opc | sf | (shift // 16) << 21 | value << 5 | rd


def _enc_adr(mnem, ops, pc, labels, relocs) -> int:
    rd, _ = _reg(ops[0])
    target = ops[1].strip()
    base = 0x90000000 if mnem == "adrp" else 0x10000000
    if target.endswith("@page"):
        relocs.append(Reloc(pc, "page21", target[:-5]))
        return base | rd
    if mnem == "adr":
        delta = _branch_target(target, pc, labels, relocs, "adr21")
        imm = _fit_signed(delta, 21, "adr offset")
        return base | (imm & 3) << 29 | ((imm >> 2) & 0x7FFFF) << 5 | rd
    raise AsmError("adrp needs a label@page operand")


def _enc_addsub(mnem, ops, relocs, pc) -> int:
    flags = mnem in ("adds", "subs", "cmp", "cmn")
    if mnem in ("cmp", "cmn"):
        rd, args = 31, ops
        op_is_sub = mnem == "cmp"
        rn, is64 = _reg(args[0], allow_sp=True, allow_zr=False)
        second = args[1]
    else:
        op_is_sub = mnem.startswith("sub")
        rd, is64 = _reg(ops[0], allow_sp=not flags, allow_zr=False)
        rn, _ = _reg(ops[1], allow_sp=True)
        second = ops[2]
    sf = 1 << 31 if is64 else 0
    second = second.strip()
    if second.endswith("@pageoff"):
        relocs.append(Reloc(pc, "pageoff12", second[: -len("@pageoff")]))
        second = "#0"
    if second.startswith("#"):
        value = _imm(second)
        shift = 0
        extra = ops[3] if mnem not in ("cmp", "cmn") and len(ops) > 3 else None
        if extra is not None:
            if not re.fullmatch(r"lsl\s+#?12", extra.strip(), re.I):
                raise AsmError(f"bad add/sub shift {extra!r}")
            shift = 1
        if not 0 <= value <= 0xFFF:
            if shift == 0 and value % 4096 == 0 and 0 <= value >> 12 <= 0xFFF:
                value >>= 12
                shift = 1
            else:
                raise AsmError(f"add/sub immediate {value} unencodable")
        opc = 0x11000000 | (0x40000000 if op_is_sub else 0)
        if flags:
            opc |= 0x20000000
        return opc | sf | shift << 22 | value << 10 | rn << 5 | rd
    rm, _ = _reg(second, allow_zr=True)
    opc = 0x0B000000 | (0x40000000 if op_is_sub else 0)
    if flags:
        opc |= 0x20000000
    return opc | sf | rm << 16 | rn << 5 | rd


def _enc_loadstore(mnem, ops, relocs, pc) -> int:
    rt, is64 = _reg(ops[0], allow_zr=True)
    m = _MEM.match(",".join(ops[1:]).strip()) if len(ops) >= 2 else None
    if not m:
        raise AsmError(f"bad memory operand in {ops!r}")
    rn, _ = _reg(m.group("base"), allow_sp=True)
    off_tok = m.group("off")
    pre = bool(m.group("pre"))
    post_tok = m.group("post")
    scale = 3 if is64 else 2
    size = 0xF0000000 if is64 else 0xB0000000
    load = mnem in ("ldr", "ldur")

    if mnem in ("ldur", "stur"):
        offset = _imm(off_tok) if off_tok else 0
        base = size | 0x08000000 | (0x00400000 if load else 0)
        return base | _fit_signed(offset, 9, "ldur offset") << 12 | rn << 5 | rt

    if post_tok is not None:  # post-index: ldr xT, [xN], #imm
        offset = _imm(post_tok)
        base = size | 0x08000400 | (0x00400000 if load else 0)
        return base | _fit_signed(offset, 9, "index") << 12 | rn << 5 | rt
    if pre:  # pre-index: ldr xT, [xN, #imm]!
        offset = _imm(off_tok) if off_tok else 0
        base = size | 0x08000C00 | (0x00400000 if load else 0)
        return base | _fit_signed(offset, 9, "index") << 12 | rn << 5 | rt

    # unsigned scaled offset
    offset = 0
    if off_tok:
        off_tok = off_tok.strip()
        if off_tok.endswith("@pageoff"):
            relocs.append(
                Reloc(pc, "pageoff12", off_tok[: -len("@pageoff")], shift=scale)
            )
        else:
            offset = _imm(off_tok)
    if offset % (1 << scale) or offset < 0:
        raise AsmError(f"unscaled offset {offset}; use ldur/stur")
    base = size | 0x09000000 | (0x00400000 if load else 0)
    return base | (offset >> scale) << 10 | rn << 5 | rt


def _enc_pair(mnem, ops) -> int:
    rt, is64 = _reg(ops[0], allow_zr=True)
    rt2, _ = _reg(ops[1], allow_zr=True)
    m = _MEM.match(",".join(ops[2:]).strip())
    if not m:
        raise AsmError(f"bad memory operand in {ops!r}")
    rn, _ = _reg(m.group("base"), allow_sp=True)
    offset = _imm(m.group("off")) if m.group("off") else 0
    scale = 3 if is64 else 2
    if offset % (1 << scale):
        raise AsmError("pair offset not scaled")
    imm7 = _fit_signed(offset >> scale, 7, "pair offset")
    load = mnem == "ldp"
    if m.group("post") is not None:
        imm7 = _fit_signed(_imm(m.group("post")) >> scale, 7, "pair offset")
        mode = 0x00800000
    elif m.group("pre"):
        mode = 0x01800000
    else:
        mode = 0x01000000
    base = (0xA8000000 if is64 else 0x28000000) | mode | (0x00400000 if load else 0)
    return base | imm7 << 15 | rt2 << 10 | rn << 5 | rt


def _enc_branch(mnem, ops, pc, labels, relocs) -> int:
    if mnem == "b":
        imm = _branch_target(ops[0], pc, labels, relocs, "branch26")
        return 0x14000000 | ((imm >> 2) & 0x3FFFFFF)
    cond = mnem[2:]
    if cond not in _COND:
        raise AsmError(f"unknown condition {cond!r}")
    imm = _branch_target(ops[0], pc, labels, relocs, "cond19")
    return 0x54000000 | (_fit_signed(imm >> 2, 19, "branch offset") << 5) | _COND[cond]
