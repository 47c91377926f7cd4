"""Assemble minimal but well-formed 64-bit Mach-O images for tests and demos.

The builder is append-only: callers add sections and records, referencing
other records through `Ref` placeholders, then call `build()` once.  Layout
assigns every section a file offset and virtual address with va == base +
file_offset, resolves all refs and relocations, and serializes.  After
`build()` the handles expose their final addresses so callers can emit an
expected-values manifest from the same source of truth that produced the
binary, independent of any parser.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..macho import (
    CPU_TYPE_ARM,
    CPU_TYPE_ARM64,
    CSMAGIC_EMBEDDED_ENTITLEMENTS,
    CSMAGIC_EMBEDDED_SIGNATURE,
    CSSLOT_ENTITLEMENTS,
    FAT_MAGIC,
    LC_CODE_SIGNATURE,
    LC_DYLD_INFO_ONLY,
    LC_DYSYMTAB,
    LC_ENCRYPTION_INFO_64,
    LC_FUNCTION_STARTS,
    LC_SEGMENT_64,
    LC_SYMTAB,
    MH_MAGIC_64,
    S_ZEROFILL,
    encode_uleb128,
)

MH_EXECUTE = 0x2
PAGE = 0x1000

_SEGMENT_PROT = {"__TEXT": 5, "__DATA": 3, "__DATA_CONST": 3, "__LINKEDIT": 1}


@dataclass(frozen=True)
class Ref:
    """A not-yet-known address: section handle plus byte offset plus addend."""

    handle: "SectionHandle"
    offset: int = 0
    addend: int = 0

    def resolve(self) -> int:
        if self.handle.va is None:
            raise RuntimeError("ref resolved before layout")
        return self.handle.va + self.offset + self.addend


@dataclass
class Reloc:
    """An instruction-word patch against a named label."""

    offset: int  # byte offset of the instruction within its section
    kind: str  # page21 | pageoff12 | branch26
    target: str
    shift: int = 0
    addend: int = 0


class SectionHandle:
    def __init__(
        self,
        segment_name: str,
        section_name: str,
        align: int = 8,
        flags: int = 0,
        reserved1: int = 0,
        reserved2: int = 0,
    ):
        self.segment_name = segment_name
        self.section_name = section_name
        self.align = align
        self.flags = flags
        self.reserved1 = reserved1
        self.reserved2 = reserved2
        self.content = bytearray()
        self.word_fixups: list[tuple[int, Ref]] = []
        self.delta_fixups: list[tuple[int, Ref]] = []  # i32 relative to own address
        self.relocs: list[Reloc] = []
        self.va: int | None = None
        self.file_offset: int | None = None
        self.zerofill_size = 0  # nonzero only for S_ZEROFILL sections

    @property
    def size(self) -> int:
        return self.zerofill_size if self.flags & 0xFF == S_ZEROFILL else len(self.content)

    def append(self, data: bytes, relocs: list[Reloc] | None = None) -> int:
        offset = len(self.content)
        if relocs:
            for r in relocs:
                self.relocs.append(
                    Reloc(offset + r.offset, r.kind, r.target, r.shift, r.addend)
                )
        self.content += data
        return offset

    def append_u64(self, value) -> int:
        offset = len(self.content)
        if isinstance(value, Ref):
            self.word_fixups.append((offset, value))
            self.content += b"\x00" * 8
        else:
            self.content += struct.pack("<Q", value)
        return offset

    def append_u32(self, value: int) -> int:
        offset = len(self.content)
        self.content += struct.pack("<I", value)
        return offset

    def append_i32_delta(self, target: Ref | int) -> int:
        """A signed 32-bit field holding (target - field's own address)."""
        offset = len(self.content)
        if isinstance(target, Ref):
            self.delta_fixups.append((offset, target))
            self.content += b"\x00" * 4
        else:
            self.content += struct.pack("<i", target)
        return offset

    def append_cstring(self, text: str) -> int:
        return self.append(text.encode("utf-8") + b"\x00")

    def patch_u64(self, offset: int, value) -> None:
        if isinstance(value, Ref):
            self.word_fixups.append((offset, value))
        else:
            self.content[offset : offset + 8] = struct.pack("<Q", value)

    def ref(self, offset: int = 0, addend: int = 0) -> Ref:
        return Ref(self, offset, addend)


@dataclass
class _Symbol:
    name: str
    where: Ref | int | None
    external: bool
    debug: bool


class MachoBuilder:
    def __init__(self, base: int = 0x100000000, cpu_subtype: int = 0):
        self.base = base
        self.cpu_subtype = cpu_subtype
        self._sections: dict[tuple[str, str], SectionHandle] = {}
        self._segment_order: list[str] = []
        self._symbols: list[_Symbol] = []
        self._indirect: list[int] = []
        self._function_starts: list[Ref | int] | None = None
        self._entitlements: str | None = None
        self._binds: list[tuple[Ref, str]] = []
        self._encryption: int | None = None
        self._raw_commands: list[tuple[int, bytes]] = []
        self._labels: dict[str, Ref] = {}
        self._built: bytes | None = None

    # ---- declaration API ----

    def section(
        self,
        segment_name: str,
        section_name: str,
        align: int = 8,
        flags: int = 0,
        reserved1: int = 0,
        reserved2: int = 0,
    ) -> SectionHandle:
        key = (segment_name, section_name)
        if key not in self._sections:
            if segment_name not in self._segment_order:
                self._segment_order.append(segment_name)
            self._sections[key] = SectionHandle(
                segment_name, section_name, align, flags, reserved1, reserved2
            )
        return self._sections[key]

    def zerofill(self, segment_name: str, section_name: str, size: int) -> SectionHandle:
        handle = self.section(segment_name, section_name, flags=S_ZEROFILL)
        handle.zerofill_size = size
        return handle

    def add_symbol(self, name: str, where: Ref | int | None, external=False, debug=False) -> int:
        self._symbols.append(_Symbol(name, where, external, debug))
        return len(self._symbols) - 1

    def add_undefined(self, name: str) -> int:
        return self.add_symbol(name, None, external=True)

    def set_indirect_symbols(self, indices: list[int]) -> None:
        self._indirect = list(indices)

    def set_function_starts(self, starts: list[Ref | int]) -> None:
        self._function_starts = list(starts)

    def set_entitlements(self, xml_text: str) -> None:
        self._entitlements = xml_text

    def add_bind(self, where: Ref, symbol: str) -> None:
        self._binds.append((where, symbol))

    def set_encryption(self, cryptid: int) -> None:
        self._encryption = cryptid

    def add_raw_command(self, cmd: int, body: bytes) -> None:
        """Body excludes the 8-byte (cmd, cmdsize) header; padded to 8."""
        self._raw_commands.append((cmd, body))

    def label(self, name: str, ref: Ref) -> None:
        self._labels[name] = ref

    # ---- layout and serialization ----

    def _segments(self) -> list[tuple[str, list[SectionHandle]]]:
        order = list(self._segment_order)
        if "__TEXT" in order:
            order.remove("__TEXT")
            order.insert(0, "__TEXT")
        out = []
        for seg in order:
            handles = [h for (s, _), h in self._sections.items() if s == seg]
            out.append((seg, handles))
        return out

    def build(self) -> bytes:
        if self._built is not None:
            return self._built
        segments = self._segments()
        has_linkedit = bool(
            self._symbols
            or self._indirect
            or self._function_starts is not None
            or self._entitlements is not None
            or self._binds
        )

        ncmds = len(segments) + (1 if has_linkedit else 0)
        sizeofcmds = sum(72 + 80 * len(hs) for _, hs in segments)
        if has_linkedit:
            sizeofcmds += 72
        if self._binds:
            ncmds += 1
            sizeofcmds += 48
        if self._symbols:
            ncmds += 1
            sizeofcmds += 24
        if self._indirect:
            ncmds += 1
            sizeofcmds += 80
        if self._function_starts is not None:
            ncmds += 1
            sizeofcmds += 16
        if self._encryption is not None:
            ncmds += 1
            sizeofcmds += 24
        if self._entitlements is not None:
            ncmds += 1
            sizeofcmds += 16
        for _, body in self._raw_commands:
            ncmds += 1
            sizeofcmds += 8 + _pad8(len(body))

        # lay out sections segment by segment; va tracks file offset exactly
        cursor = _align(32 + sizeofcmds, 16)
        seg_records: list[dict] = []
        for index, (segname, handles) in enumerate(segments):
            if index == 0 and segname == "__TEXT":
                seg_file_start = 0
            else:
                cursor = _align(cursor, PAGE)
                seg_file_start = cursor
            zerofill_tail = 0
            for h in handles:
                if h.flags & 0xFF == S_ZEROFILL:
                    continue
                cursor = _align(cursor, h.align)
                h.file_offset = cursor
                h.va = self.base + cursor
                cursor += len(h.content)
            for h in handles:  # zero-fill sections live past the file-backed tail
                if h.flags & 0xFF != S_ZEROFILL:
                    continue
                h.file_offset = 0
                h.va = self.base + cursor + zerofill_tail
                zerofill_tail += h.zerofill_size
            file_size = cursor - seg_file_start
            seg_records.append(
                {
                    "name": segname,
                    "vmaddr": self.base + seg_file_start,
                    "vmsize": _align(file_size + zerofill_tail, PAGE),
                    "fileoff": seg_file_start,
                    "filesize": file_size,
                    "prot": _SEGMENT_PROT.get(segname, 3),
                    "handles": handles,
                }
            )

        # __LINKEDIT blobs, laid out in a fixed order
        linkedit_start = _align(cursor, PAGE)
        cursor = linkedit_start

        fs_payload = b""
        fs_off = 0
        if self._function_starts is not None:
            addrs = sorted(
                r.resolve() if isinstance(r, Ref) else r for r in self._function_starts
            )
            if addrs:
                prev = self.base
                parts = []
                for a in addrs:
                    parts.append(encode_uleb128(a - prev))
                    prev = a
                parts.append(b"\x00")
                fs_payload = b"".join(parts)
            fs_off = cursor
            cursor += len(fs_payload)

        bind_blob = b""
        bind_off = 0
        if self._binds:
            bind_blob = self._encode_binds(seg_records)
            bind_off = cursor
            cursor += len(bind_blob)

        sym_blob = b""
        str_blob = b""
        symoff = stroff = 0
        if self._symbols:
            sym_parts = []
            str_parts = [b"\x00"]
            str_cursor = 1
            for sym in self._symbols:
                if sym.name:
                    n_strx = str_cursor
                    encoded = sym.name.encode("utf-8") + b"\x00"
                    str_parts.append(encoded)
                    str_cursor += len(encoded)
                else:
                    n_strx = 0
                if sym.debug:
                    n_type = 0x24  # N_FUN stab
                elif sym.where is None:
                    n_type = 0x01  # undefined external
                else:
                    n_type = 0x0E | (0x01 if sym.external else 0)
                value = 0
                if isinstance(sym.where, Ref):
                    value = sym.where.resolve()
                elif isinstance(sym.where, int):
                    value = sym.where
                sym_parts.append(struct.pack("<IBBHQ", n_strx, n_type, 1, 0, value))
            sym_blob = b"".join(sym_parts)
            str_blob = b"".join(str_parts)
            symoff = cursor
            cursor += len(sym_blob)
            stroff = cursor
            cursor += len(str_blob)

        indirect_blob = b""
        indirectoff = 0
        if self._indirect:
            indirect_blob = struct.pack(f"<{len(self._indirect)}I", *self._indirect)
            indirectoff = cursor
            cursor += len(indirect_blob)

        sig_blob = b""
        sig_off = 0
        if self._entitlements is not None:
            payload = self._entitlements.encode("utf-8")
            ent_blob = struct.pack(">II", CSMAGIC_EMBEDDED_ENTITLEMENTS, 8 + len(payload)) + payload
            total = 12 + 8 + len(ent_blob)
            sig_blob = (
                struct.pack(">III", CSMAGIC_EMBEDDED_SIGNATURE, total, 1)
                + struct.pack(">II", CSSLOT_ENTITLEMENTS, 20)
                + ent_blob
            )
            sig_off = cursor
            cursor += len(sig_blob)

        linkedit_size = cursor - linkedit_start
        if has_linkedit:
            seg_records.append(
                {
                    "name": "__LINKEDIT",
                    "vmaddr": self.base + linkedit_start,
                    "vmsize": _align(linkedit_size, PAGE),
                    "fileoff": linkedit_start,
                    "filesize": linkedit_size,
                    "prot": 1,
                    "handles": [],
                }
            )
        file_size = cursor

        # resolve refs and relocations now that every va is known
        for handle in self._sections.values():
            for offset, ref in handle.word_fixups:
                handle.content[offset : offset + 8] = struct.pack("<Q", ref.resolve())
            for offset, ref in handle.delta_fixups:
                delta = ref.resolve() - (handle.va + offset)
                handle.content[offset : offset + 4] = struct.pack("<i", delta)
            for reloc in handle.relocs:
                self._apply_reloc(handle, reloc)

        # serialize
        out = bytearray(file_size)
        struct.pack_into(
            "<IiiIIIII",
            out,
            0,
            MH_MAGIC_64,
            CPU_TYPE_ARM64,
            self.cpu_subtype,
            MH_EXECUTE,
            ncmds,
            sizeofcmds,
            0,
            0,
        )
        pos = 32
        for rec in seg_records:
            nsects = len(rec["handles"])
            struct.pack_into(
                "<II16sQQQQiiII",
                out,
                pos,
                LC_SEGMENT_64,
                72 + 80 * nsects,
                rec["name"].encode("ascii"),
                rec["vmaddr"],
                rec["vmsize"],
                rec["fileoff"],
                rec["filesize"],
                rec["prot"],
                rec["prot"],
                nsects,
                0,
            )
            pos += 72
            for h in rec["handles"]:
                struct.pack_into(
                    "<16s16sQQIIIIIII",
                    out,
                    pos,
                    h.section_name.encode("ascii"),
                    h.segment_name.encode("ascii"),
                    h.va,
                    h.size,
                    h.file_offset,
                    0,
                    0,
                    0,
                    h.flags,
                    h.reserved1,
                    h.reserved2,
                )
                pos += 80
        if self._binds:
            struct.pack_into(
                "<II10I", out, pos, LC_DYLD_INFO_ONLY, 48,
                0, 0, bind_off, len(bind_blob), 0, 0, 0, 0, 0, 0,
            )
            pos += 48
        if self._symbols:
            struct.pack_into(
                "<IIIIII", out, pos, LC_SYMTAB, 24,
                symoff, len(self._symbols), stroff, len(str_blob),
            )
            pos += 24
        if self._indirect:
            fields = [0] * 18
            fields[12] = indirectoff
            fields[13] = len(self._indirect)
            struct.pack_into("<II18I", out, pos, LC_DYSYMTAB, 80, *fields)
            pos += 80
        if self._function_starts is not None:
            struct.pack_into(
                "<IIII", out, pos, LC_FUNCTION_STARTS, 16, fs_off, len(fs_payload)
            )
            pos += 16
        if self._encryption is not None:
            struct.pack_into(
                "<IIIIII", out, pos, LC_ENCRYPTION_INFO_64, 24,
                PAGE, PAGE, self._encryption, 0,
            )
            pos += 24
        if self._entitlements is not None:
            struct.pack_into(
                "<IIII", out, pos, LC_CODE_SIGNATURE, 16, sig_off, len(sig_blob)
            )
            pos += 16
        for cmd, body in self._raw_commands:
            padded = body + b"\x00" * (_pad8(len(body)) - len(body))
            struct.pack_into("<II", out, pos, cmd, 8 + len(padded))
            out[pos + 8 : pos + 8 + len(padded)] = padded
            pos += 8 + len(padded)

        for handle in self._sections.values():
            if handle.flags & 0xFF == S_ZEROFILL:
                continue
            start = handle.file_offset
            out[start : start + len(handle.content)] = handle.content
        for blob, off in (
            (fs_payload, fs_off),
            (bind_blob, bind_off),
            (sym_blob, symoff),
            (str_blob, stroff),
            (indirect_blob, indirectoff),
            (sig_blob, sig_off),
        ):
            if blob:
                out[off : off + len(blob)] = blob

        self._built = bytes(out)
        return self._built

    def _encode_binds(self, seg_records: list[dict]) -> bytes:
        seg_index = {rec["name"]: i for i, rec in enumerate(seg_records)}
        items = []
        for ref, symbol in self._binds:
            va = ref.resolve()
            idx = seg_index[ref.handle.segment_name]
            items.append((idx, va - seg_records[idx]["vmaddr"], symbol))
        items.sort()
        out = bytearray()
        for idx, offset, symbol in items:
            out.append(0x40)  # SET_SYMBOL_TRAILING_FLAGS_IMM, flags 0
            out += symbol.encode("utf-8") + b"\x00"
            out.append(0x50 | 1)  # SET_TYPE_IMM POINTER
            out.append(0x10 | 1)  # SET_DYLIB_ORDINAL_IMM 1
            out.append(0x70 | idx)
            out += encode_uleb128(offset)
            out.append(0x90)  # DO_BIND
        out.append(0x00)
        return bytes(out)

    def _apply_reloc(self, handle: SectionHandle, reloc: Reloc) -> None:
        if reloc.target not in self._labels:
            raise KeyError(f"undefined label {reloc.target!r}")
        target = self._labels[reloc.target].resolve() + reloc.addend
        pc = handle.va + reloc.offset
        word = struct.unpack_from("<I", handle.content, reloc.offset)[0]
        if reloc.kind == "page21":
            delta = (target & ~0xFFF) - (pc & ~0xFFF)
            imm = (delta >> 12) & 0x1FFFFF
            word |= ((imm & 3) << 29) | (((imm >> 2) & 0x7FFFF) << 5)
        elif reloc.kind == "pageoff12":
            imm12 = (target & 0xFFF) >> reloc.shift
            word |= (imm12 & 0xFFF) << 10
        elif reloc.kind == "branch26":
            delta = target - pc
            word |= (delta >> 2) & 0x3FFFFFF
        elif reloc.kind == "cond19":
            delta = target - pc
            word |= ((delta >> 2) & 0x7FFFF) << 5
        elif reloc.kind == "cond14":
            delta = target - pc
            word |= ((delta >> 2) & 0x3FFF) << 5
        else:
            raise ValueError(f"unknown reloc kind {reloc.kind}")
        struct.pack_into("<I", handle.content, reloc.offset, word)


def _align(value: int, boundary: int) -> int:
    return (value + boundary - 1) & ~(boundary - 1)


def _pad8(n: int) -> int:
    return _align(n, 8)


def build_fat(
    slices: list[tuple[int, int, bytes]], offsets: list[int] | None = None
) -> bytes:
    """Wrap thin images in a 32-bit fat container (big-endian header)."""
    align_log2 = 14
    records = []
    cursor = 8 + 20 * len(slices)
    for i, (cputype, subtype, blob) in enumerate(slices):
        if offsets is not None:
            offset = offsets[i]
        else:
            offset = _align(cursor, 1 << align_log2)
        records.append((cputype, subtype, offset, len(blob), align_log2))
        cursor = offset + len(blob)
    total = max(r[2] + r[3] for r in records)
    out = bytearray(total)
    struct.pack_into(">II", out, 0, FAT_MAGIC, len(slices))
    for i, rec in enumerate(records):
        struct.pack_into(">iiIII", out, 8 + 20 * i, *rec)
    for rec, (_, _, blob) in zip(records, slices):
        out[rec[2] : rec[2] + len(blob)] = blob
    return bytes(out)


ARM64 = CPU_TYPE_ARM64
ARMV7 = CPU_TYPE_ARM
