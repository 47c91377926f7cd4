"""Objective-C runtime metadata: classes, meta-classes, protocols, selectors.

Reads the `__objc_*` sections of a parsed image.  Class records follow the
modern 64-bit ABI: class_t is five 8-byte words (isa, superclass, cache,
vtable, data) with the read-only class_ro record hanging off the low-bit
masked `data` word.  Malformed entries degrade to per-entry warnings; parsing
never aborts on bad metadata.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

from .errors import CyclicSuperclassChain, DanglingReference
from .macho import (
    MachoImage,
    read_cstring,
    read_u64,
    section_bytes,
    strip_pac,
    va_to_offset,
)

log = logging.getLogger(__name__)

RO_META = 0x1

# method_list_t entsize flags
METHOD_LIST_RELATIVE = 0x80000000
METHOD_LIST_DIRECT_SELECTORS = 0x40000000

_DATA_SEGMENTS = ("__DATA", "__DATA_CONST", "__DATA_DIRTY")


@dataclass
class ObjcMethod:
    selector: str
    type_encoding: str
    impl_address: int | None


@dataclass
class ObjcClass:
    name: str
    address: int
    superclass_ref: int | None
    metaclass_ref: int | None
    methods: list[ObjcMethod] = field(default_factory=list)
    ivars: list[tuple[str, str, int]] = field(default_factory=list)
    properties: list[tuple[str, str]] = field(default_factory=list)
    protocol_refs: list[int] = field(default_factory=list)
    is_metaclass: bool = False
    is_external: bool = False
    malformed: bool = False
    superclass_name: str | None = None  # for import-bound superclasses


@dataclass
class ObjcProtocol:
    name: str
    address: int
    required_methods: list[ObjcMethod] = field(default_factory=list)
    optional_methods: list[ObjcMethod] = field(default_factory=list)
    inherited_protocol_refs: list[int] = field(default_factory=list)


@dataclass
class SelectorMap:
    by_selref_address: dict[int, str] = field(default_factory=dict)
    by_name: dict[str, set[int]] = field(default_factory=dict)

    def add(self, slot: int, name: str) -> None:
        self.by_selref_address[slot] = name
        self.by_name.setdefault(name, set()).add(slot)


@dataclass
class ObjcModel:
    classes: list[ObjcClass]
    protocols: list[ObjcProtocol]
    by_address: dict[int, ObjcClass]
    by_name: dict[str, ObjcClass]
    protocol_by_address: dict[int, ObjcProtocol]
    method_index: dict[int, tuple[ObjcClass, ObjcMethod]]
    selmap: SelectorMap | None = None
    image: MachoImage | None = None
    warnings: list[str] = field(default_factory=list)
    root_cycle_ok: bool | None = None  # None when no in-image root exists

    def superclass_of(self, cls: ObjcClass) -> ObjcClass | None:
        if cls.superclass_ref is not None:
            return self.by_address.get(cls.superclass_ref)
        if cls.superclass_name is not None:
            return self.by_name.get(cls.superclass_name)
        return None

    def lookup(self, class_name: str, selector: str) -> tuple[ObjcClass, ObjcMethod] | None:
        """Walk the hierarchy upward from class_name for a selector match."""
        cls = self.by_name.get(class_name)
        seen = set()
        while cls is not None and cls.address not in seen:
            seen.add(cls.address)
            for m in cls.methods:
                if m.selector == selector:
                    return cls, m
            cls = self.superclass_of(cls)
        return None

    def protocols_of(self, cls: ObjcClass) -> list[ObjcProtocol]:
        return [
            self.protocol_by_address[ref]
            for ref in cls.protocol_refs
            if ref in self.protocol_by_address
        ]

    def class_of_impl(self, ea: int) -> tuple[ObjcClass, ObjcMethod] | None:
        return self.method_index.get(ea)


def _objc_section(image: MachoImage, name: str) -> bytes | None:
    for seg in _DATA_SEGMENTS:
        data = section_bytes(image, seg, name)
        if data is not None:
            return data
    return None


def _objc_section_va(image: MachoImage, name: str) -> int | None:
    for seg in _DATA_SEGMENTS:
        sect = image.section(seg, name)
        if sect is not None:
            return sect.vm_addr
    return None


def _pointer_slots(image: MachoImage, section_name: str) -> list[tuple[int, int]]:
    """(slot address, PAC-masked value) pairs of an 8-byte-pointer section."""
    data = _objc_section(image, section_name)
    base = _objc_section_va(image, section_name)
    if data is None or base is None:
        return []
    out = []
    for i in range(0, len(data) - len(data) % 8, 8):
        value = struct.unpack_from("<Q", data, i)[0]
        out.append((base + i, strip_pac(value)))
    return out


def parse_selrefs(image: MachoImage, warnings: list[str] | None = None) -> SelectorMap:
    """Dereference each `__objc_selrefs` slot into `__objc_methname`."""
    selmap = SelectorMap()
    methname = image.section("__TEXT", "__objc_methname")
    slots = _pointer_slots(image, "__objc_selrefs") or _pointer_slots(
        image, "__objc_selref"
    )
    for slot, target in slots:
        if methname is None or not methname.contains_va(target):
            msg = f"selref slot {slot:#x} points outside __objc_methname"
            (warnings if warnings is not None else image.warnings).append(msg)
            continue
        text = read_cstring(image, target)
        if text is None:
            continue
        selmap.add(slot, text)
    return selmap


def _read_method_list(image: MachoImage, va: int, in_image: bool) -> list[ObjcMethod]:
    if va == 0:
        return []
    off = va_to_offset(image, va)
    if off is None:
        raise DanglingReference(f"method list at {va:#x} unmapped")
    entsize_flags, count = struct.unpack_from("<II", image.data, off)
    relative = bool(entsize_flags & METHOD_LIST_RELATIVE)
    direct = bool(entsize_flags & METHOD_LIST_DIRECT_SELECTORS)
    methods = []
    if relative:
        entry_size = entsize_flags & 0x3FFFFFFF & 0xFFFF
        if entry_size != 12:
            raise DanglingReference(f"relative method list entsize {entry_size}")
        for i in range(count):
            base = va + 8 + i * 12
            name_off, types_off, imp_off = struct.unpack_from(
                "<iii", image.data, off + 8 + i * 12
            )
            name_target = base + name_off
            if not direct:
                name_target = read_u64(image, name_target)
                if name_target is None:
                    raise DanglingReference("relative selector slot unmapped")
                name_target = strip_pac(name_target)
            selector = read_cstring(image, name_target) or ""
            types = read_cstring(image, base + 4 + types_off) or ""
            impl = base + 8 + imp_off if in_image else None
            methods.append(ObjcMethod(selector, types, impl))
        return methods
    for i in range(count):
        name_ptr, types_ptr, imp_ptr = struct.unpack_from(
            "<QQQ", image.data, off + 8 + i * 24
        )
        selector = read_cstring(image, strip_pac(name_ptr)) or ""
        types = read_cstring(image, strip_pac(types_ptr)) or ""
        impl = strip_pac(imp_ptr) if in_image and imp_ptr else None
        methods.append(ObjcMethod(selector, types, impl))
    return methods


def _read_protocol_refs(image: MachoImage, va: int) -> list[int]:
    if va == 0:
        return []
    off = va_to_offset(image, va)
    if off is None:
        raise DanglingReference(f"protocol list at {va:#x} unmapped")
    count = struct.unpack_from("<Q", image.data, off)[0]
    if count > 0x10000:
        raise DanglingReference(f"protocol list count {count} implausible")
    refs = []
    for i in range(count):
        ptr = read_u64(image, va + 8 + i * 8)
        if ptr is None:
            raise DanglingReference("protocol list entry unmapped")
        refs.append(strip_pac(ptr))
    return refs


def _read_ivars(image: MachoImage, va: int) -> list[tuple[str, str, int]]:
    if va == 0:
        return []
    off = va_to_offset(image, va)
    if off is None:
        raise DanglingReference(f"ivar list at {va:#x} unmapped")
    _entsize, count = struct.unpack_from("<II", image.data, off)
    out = []
    for i in range(count):
        offset_ptr, name_ptr, type_ptr, _align, _size = struct.unpack_from(
            "<QQQII", image.data, off + 8 + i * 32
        )
        name = read_cstring(image, strip_pac(name_ptr)) or ""
        type_enc = read_cstring(image, strip_pac(type_ptr)) or ""
        ivar_offset = 0
        if offset_ptr:
            slot = va_to_offset(image, strip_pac(offset_ptr))
            if slot is not None:
                ivar_offset = struct.unpack_from("<I", image.data, slot)[0]
        out.append((name, type_enc, ivar_offset))
    return out


def _read_properties(image: MachoImage, va: int) -> list[tuple[str, str]]:
    if va == 0:
        return []
    off = va_to_offset(image, va)
    if off is None:
        raise DanglingReference(f"property list at {va:#x} unmapped")
    _entsize, count = struct.unpack_from("<II", image.data, off)
    out = []
    for i in range(count):
        name_ptr, attr_ptr = struct.unpack_from("<QQ", image.data, off + 8 + i * 16)
        out.append(
            (
                read_cstring(image, strip_pac(name_ptr)) or "",
                read_cstring(image, strip_pac(attr_ptr)) or "",
            )
        )
    return out


def _parse_class_t(
    image: MachoImage, address: int, is_meta: bool, warnings: list[str]
) -> ObjcClass:
    words = [read_u64(image, address + i * 8) for i in range(5)]
    if any(w is None for w in words):
        raise DanglingReference(f"class_t at {address:#x} unmapped")
    isa, superclass, _cache, _vtable, data = (strip_pac(w) for w in words)
    ro = data & ~0x7
    ro_off = va_to_offset(image, ro)
    if ro_off is None:
        raise DanglingReference(f"class_ro at {ro:#x} unmapped")
    flags = struct.unpack_from("<I", image.data, ro_off)[0]
    # class_ro: 16 bytes of scalars, then ivarLayout(16), name(24),
    # baseMethodList(32), baseProtocols(40), ivars(48), weakIvarLayout(56),
    # baseProperties(64)
    name_ptr, methods_ptr, protocols_ptr, ivars_ptr = struct.unpack_from(
        "<QQQQ", image.data, ro_off + 24
    )
    props_ptr = struct.unpack_from("<Q", image.data, ro_off + 64)[0]
    name = read_cstring(image, strip_pac(name_ptr)) or f"class@{address:#x}"

    superclass_ref: int | None = superclass or None
    superclass_name = None
    if superclass == 0:
        bound = image.bind_map.get(address + 8)
        if bound is not None:
            superclass_name = _strip_class_prefix(bound)
    cls = ObjcClass(
        name=name,
        address=address,
        superclass_ref=superclass_ref,
        metaclass_ref=isa or None,
        is_metaclass=is_meta or bool(flags & RO_META),
        superclass_name=superclass_name,
    )
    try:
        cls.methods = _read_method_list(image, strip_pac(methods_ptr), True)
        cls.protocol_refs = _read_protocol_refs(image, strip_pac(protocols_ptr))
        cls.ivars = _read_ivars(image, strip_pac(ivars_ptr))
        cls.properties = _read_properties(image, strip_pac(props_ptr))
    except DanglingReference as exc:
        cls.malformed = True
        warnings.append(f"class {name}: {exc}")
    return cls


def _strip_class_prefix(symbol: str) -> str:
    for prefix in ("_OBJC_CLASS_$_", "_OBJC_METACLASS_$_"):
        if symbol.startswith(prefix):
            return symbol[len(prefix) :]
    return symbol.lstrip("_")


def parse_classlist(image: MachoImage) -> list[ObjcClass]:
    """Concrete classes from `__objc_classlist` plus their meta-classes and
    placeholder entries for import-bound external superclasses."""
    warnings = image.warnings
    out: list[ObjcClass] = []
    seen: dict[int, ObjcClass] = {}
    for slot, target in _pointer_slots(image, "__objc_classlist"):
        if target == 0:
            bound = image.bind_map.get(slot)
            if bound:
                warnings.append(f"classlist slot {slot:#x} binds external {bound}")
            continue
        try:
            cls = _parse_class_t(image, target, False, warnings)
        except DanglingReference as exc:
            warnings.append(f"classlist slot {slot:#x}: {exc}")
            out.append(
                ObjcClass(
                    name=f"malformed@{target:#x}",
                    address=target,
                    superclass_ref=None,
                    metaclass_ref=None,
                    malformed=True,
                )
            )
            continue
        seen[cls.address] = cls
        out.append(cls)
        if cls.metaclass_ref and cls.metaclass_ref not in seen:
            if va_to_offset(image, cls.metaclass_ref) is None:
                bound = image.bind_map.get(target)  # isa is word 0 of class_t
                name = _strip_class_prefix(bound) if bound else f"external@{cls.metaclass_ref:#x}"
                meta = ObjcClass(
                    name=name,
                    address=cls.metaclass_ref,
                    superclass_ref=None,
                    metaclass_ref=None,
                    is_metaclass=True,
                    is_external=True,
                )
            else:
                try:
                    meta = _parse_class_t(image, cls.metaclass_ref, True, warnings)
                except DanglingReference as exc:
                    warnings.append(f"meta-class of {cls.name}: {exc}")
                    continue
            seen[meta.address] = meta
            out.append(meta)

    # placeholders for external superclasses referenced by bind symbol
    for cls in list(out):
        if cls.superclass_name and cls.superclass_name not in {
            c.name for c in out
        }:
            slot_addr = cls.address + 8
            out.append(
                ObjcClass(
                    name=cls.superclass_name,
                    address=slot_addr,
                    superclass_ref=None,
                    metaclass_ref=None,
                    is_metaclass=cls.is_metaclass,
                    is_external=True,
                )
            )
    out.sort(key=lambda c: c.address)
    return out


def _parse_protocol_t(image: MachoImage, address: int) -> ObjcProtocol:
    name_ptr = read_u64(image, address + 8)
    protos_ptr = read_u64(image, address + 16)
    inst_ptr = read_u64(image, address + 24)
    class_ptr = read_u64(image, address + 32)
    opt_inst_ptr = read_u64(image, address + 40)
    opt_class_ptr = read_u64(image, address + 48)
    if name_ptr is None:
        raise DanglingReference(f"protocol_t at {address:#x} unmapped")
    name = read_cstring(image, strip_pac(name_ptr)) or f"protocol@{address:#x}"
    proto = ObjcProtocol(name=name, address=address)
    required = []
    for ptr in (inst_ptr, class_ptr):
        if ptr:
            required += _read_method_list(image, strip_pac(ptr), False)
    optional = []
    for ptr in (opt_inst_ptr, opt_class_ptr):
        if ptr:
            optional += _read_method_list(image, strip_pac(ptr), False)
    proto.required_methods = required
    proto.optional_methods = optional
    if protos_ptr:
        proto.inherited_protocol_refs = _read_protocol_refs(
            image, strip_pac(protos_ptr)
        )
    return proto


def parse_protocols(image: MachoImage) -> list[ObjcProtocol]:
    out = []
    for slot, target in _pointer_slots(image, "__objc_protolist"):
        if target == 0:
            continue
        try:
            out.append(_parse_protocol_t(image, target))
        except DanglingReference as exc:
            image.warnings.append(f"protolist slot {slot:#x}: {exc}")
    out.sort(key=lambda p: p.address)
    return out


@dataclass
class ObjcCategory:
    name: str
    class_ref: int | None
    class_name: str | None
    methods: list[ObjcMethod]


def parse_categories(image: MachoImage) -> list[ObjcCategory]:
    out = []
    for slot, target in _pointer_slots(image, "__objc_catlist"):
        if target == 0:
            continue
        name_ptr = read_u64(image, target)
        cls_ptr = read_u64(image, target + 8)
        inst_ptr = read_u64(image, target + 16)
        class_meth_ptr = read_u64(image, target + 24)
        if name_ptr is None:
            image.warnings.append(f"catlist slot {slot:#x} unmapped")
            continue
        name = read_cstring(image, strip_pac(name_ptr)) or f"category@{target:#x}"
        class_name = None
        cls_ref = strip_pac(cls_ptr) if cls_ptr else None
        if not cls_ref:
            bound = image.bind_map.get(target + 8)
            class_name = _strip_class_prefix(bound) if bound else None
        methods = []
        try:
            for ptr in (inst_ptr, class_meth_ptr):
                if ptr:
                    methods += _read_method_list(image, strip_pac(ptr), True)
        except DanglingReference as exc:
            image.warnings.append(f"category {name}: {exc}")
        out.append(ObjcCategory(name, cls_ref, class_name, methods))
    return out


def build_hierarchy(
    classes: list[ObjcClass],
    protocols: list[ObjcProtocol],
    categories: list[ObjcCategory] = (),
    selmap: SelectorMap | None = None,
    image: MachoImage | None = None,
) -> ObjcModel:
    warnings: list[str] = []
    by_address = {c.address: c for c in classes}
    by_name: dict[str, ObjcClass] = {}
    for c in sorted(classes, key=lambda c: c.address):
        existing = by_name.get(c.name)
        # concrete class wins the name slot over its meta-class
        if existing is None or (existing.is_metaclass and not c.is_metaclass):
            by_name[c.name] = c

    model = ObjcModel(
        classes=sorted(classes, key=lambda c: c.address),
        protocols=sorted(protocols, key=lambda p: p.address),
        by_address=by_address,
        by_name=by_name,
        protocol_by_address={p.address: p for p in protocols},
        method_index={},
        selmap=selmap,
        image=image,
        warnings=warnings,
    )

    # merge category methods into their target classes
    for cat in categories:
        target = None
        if cat.class_ref is not None:
            target = by_address.get(cat.class_ref)
        elif cat.class_name is not None:
            target = by_name.get(cat.class_name)
        if target is None:
            warnings.append(f"category {cat.name} targets an unknown class")
            continue
        known = {m.selector for m in target.methods}
        target.methods.extend(m for m in cat.methods if m.selector not in known)

    # break concrete superclass cycles
    for cls in model.classes:
        if cls.is_metaclass:
            continue
        seen = {cls.address}
        cur = cls
        while True:
            nxt = model.superclass_of(cur)
            if nxt is None:
                break
            if nxt.address in seen:
                warnings.append(
                    f"{CyclicSuperclassChain.__name__}: {cur.name} -> {nxt.name}; edge dropped"
                )
                cur.superclass_ref = None
                cur.superclass_name = None
                break
            seen.add(nxt.address)
            cur = nxt

    # validate the root meta-class self-cycle when the root is in-image
    for cls in model.classes:
        if cls.is_metaclass or cls.is_external or cls.malformed:
            continue
        if cls.superclass_ref is None and cls.superclass_name is None:
            meta = by_address.get(cls.metaclass_ref) if cls.metaclass_ref else None
            if meta is None or meta.is_external:
                continue
            ok = meta.metaclass_ref == meta.address
            ok = ok and meta.superclass_ref == cls.address
            model.root_cycle_ok = bool(ok) and (
                model.root_cycle_ok in (None, True)
            )
            if not ok:
                warnings.append(
                    f"root {cls.name}: meta-class isa/superclass cycle malformed"
                )

    for cls in model.classes:
        for m in cls.methods:
            if m.impl_address is None:
                continue
            if m.impl_address in model.method_index:
                warnings.append(
                    f"impl {m.impl_address:#x} claimed by two methods; keeping first"
                )
                continue
            model.method_index[m.impl_address] = (cls, m)
    return model


def load_model(image: MachoImage) -> ObjcModel:
    """One-call frontend: parse every objc section and build the model."""
    classes = parse_classlist(image)
    protocols = parse_protocols(image)
    categories = parse_categories(image)
    selmap = parse_selrefs(image)
    return build_hierarchy(classes, protocols, categories, selmap, image)
