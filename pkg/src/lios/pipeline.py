"""End-to-end lifting: ingest, decode, assemble, analyze, write artifacts.

Artifacts are deterministic: the graph dump and findings JSON from two
runs over the same input are byte-identical. Timings go into the stats
block and the log only.
"""

from __future__ import annotations

import json
import logging
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

from . import analyses
from .disasm import build_function
from .errors import (
    EmptyRange,
    EncryptedBinary,
    MalformedPlist,
    MissingExecutable,
    NotAnIpa,
)
from .graph import PropertyGraph, build_from_frontends, dump, link_pass, mark_entrypoints
from .macho import parse_macho
from .objc import load_model
from .plist import canonical_json, parse_plist

log = logging.getLogger("lios")

MACHO_MAGICS = (b"\xcf\xfa\xed\xfe", b"\xce\xfa\xed\xfe", b"\xca\xfe\xba\xbe")

DEFAULT_PASSES = ("link", "entrypoints")


@dataclass
class AnalysisConfig:
    input: str
    entitlements: str | None = None
    rules: str | None = None
    l_max: int = 64
    depth: int = 2
    out_dir: str = "lios-out"
    passes: tuple = DEFAULT_PASSES

    def __post_init__(self):
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        unknown = set(self.passes) - set(DEFAULT_PASSES)
        if unknown:
            raise ValueError(f"unknown passes: {sorted(unknown)}")


@dataclass
class Ingested:
    binary: bytes
    kind: str  # "ipa" | "macho"
    name: str
    info: dict | None = None
    info_error: str | None = None


def _app_members(zf: zipfile.ZipFile) -> tuple[str, list[str]]:
    """(app directory prefix, member names under it) for the payload app."""
    apps = set()
    for name in zf.namelist():
        parts = name.split("/")
        if len(parts) >= 2 and parts[0] == "Payload" and parts[1].endswith(".app"):
            apps.add(f"Payload/{parts[1]}/")
    if not apps:
        raise NotAnIpa("archive has no Payload/*.app directory")
    app = sorted(apps)[0]
    members = [n for n in zf.namelist() if n.startswith(app)]
    return app, members


def ingest(path) -> Ingested:
    """An .ipa archive or a bare Mach-O image, as analysis inputs."""
    path = Path(path)
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            app, members = _app_members(zf)
            app_name = app.split("/")[1][: -len(".app")]
            info = None
            info_error = None
            executable = None
            if app + "Info.plist" in members:
                try:
                    info = parse_plist(zf.read(app + "Info.plist"))
                except MalformedPlist as exc:
                    info_error = str(exc)
                else:
                    executable = info.get("CFBundleExecutable")
            if executable is None:
                # fall back to the only other file at the bundle root
                candidates = [
                    m
                    for m in members
                    if "/" not in m[len(app):]
                    and m != app
                    and not m.endswith("Info.plist")
                ]
                if len(candidates) != 1:
                    raise MissingExecutable(
                        f"cannot determine the app executable in {path.name}"
                    )
                executable = candidates[0][len(app):]
            member = app + executable
            if member not in members:
                raise MissingExecutable(
                    f"Info.plist names {executable!r} but the bundle has no such file"
                )
            return Ingested(
                binary=zf.read(member),
                kind="ipa",
                name=executable or app_name,
                info=info,
                info_error=info_error,
            )
    data = path.read_bytes()
    if data[:4] not in MACHO_MAGICS:
        raise NotAnIpa(f"{path.name} is neither an .ipa archive nor a Mach-O image")
    return Ingested(binary=data, kind="macho", name=path.name)


def discover_functions(image, model) -> dict[int, tuple[int, int]]:
    """Function ranges from LC_FUNCTION_STARTS plus method implementations."""
    text = image.section("__TEXT", "__text")
    if text is None:
        return {}
    end_of_text = text.vm_addr + text.size
    starts = set(image.function_starts)
    for cls in model.classes:
        for method in cls.methods:
            if method.impl_address is not None:
                starts.add(method.impl_address)
    starts = sorted(s for s in starts if text.contains_va(s))
    out = {}
    for i, start in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else end_of_text
        out[start] = (start, end)
    return out


@dataclass
class PipelineResult:
    graph: PropertyGraph
    findings: list
    stats: dict
    exit_code: int
    artifacts: dict = field(default_factory=dict)


def lift(config: AnalysisConfig):
    """(graph, ingested, timings) for the configured input, passes applied."""
    timings: dict[str, float] = {}
    t = time.perf_counter()
    ingested = ingest(config.input)
    timings["ingest"] = time.perf_counter() - t

    t = time.perf_counter()
    image = parse_macho(ingested.binary)
    if image.encryption_id:
        raise EncryptedBinary(
            f"{ingested.name} is FairPlay-encrypted (cryptid "
            f"{image.encryption_id}); decrypt it on-device before lifting"
        )
    timings["parse"] = time.perf_counter() - t
    log.info("parsed %s: %d symbols, %d function starts",
             ingested.name, len(image.symbols), len(image.function_starts))

    t = time.perf_counter()
    model = load_model(image)
    timings["objc"] = time.perf_counter() - t
    log.info("objc model: %d classes, %d protocols",
             len(model.classes), len(model.protocols))

    t = time.perf_counter()
    functions = {}
    for start, (s, e) in discover_functions(image, model).items():
        try:
            functions[start] = build_function(image, s, e, model=model)
        except EmptyRange:
            continue
    timings["disasm"] = time.perf_counter() - t
    log.info("decoded %d functions", len(functions))

    entitlements = None
    if config.entitlements:
        entitlements = Path(config.entitlements).read_text(encoding="utf-8")

    t = time.perf_counter()
    graph = build_from_frontends(
        image,
        model,
        functions,
        program_name=ingested.name,
        info_json=canonical_json(ingested.info) if ingested.info is not None else None,
        entitlements=entitlements,
        depth=config.depth,
    )
    program = graph.nodes("Program")[0]
    if ingested.info_error:
        graph.set_node_prop(program.id, "info_error", ingested.info_error)
    if "link" in config.passes:
        report = link_pass(graph)
        log.info("link pass: %s", report)
    if "entrypoints" in config.passes:
        report = mark_entrypoints(graph)
        log.info("entrypoint pass: %s", report)
    timings["graph"] = time.perf_counter() - t
    return graph, ingested, timings


def run_pipeline(config: AnalysisConfig) -> PipelineResult:
    total = time.perf_counter()
    graph, ingested, timings = lift(config)

    t = time.perf_counter()
    findings = []
    findings.extend(analyses.detect_webview_bridge(graph))
    findings.extend(analyses.ats_check(graph))
    if config.rules:
        findings.extend(analyses.run_rules(graph, analyses.load_rules(config.rules)))
    findings = analyses.sort_findings(findings)
    timings["analyses"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - total

    by_severity = {s: 0 for s in analyses.SEVERITIES}
    for f in findings:
        by_severity[f.severity] += 1
    stats = dict(graph.stats())
    stats["findings"] = by_severity
    stats["input_kind"] = ingested.kind
    stats["warnings"] = list(graph.warnings)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {
        "graph": out / "graph.jsonl",
        "findings": out / "findings.json",
        "stats": out / "stats.json",
    }
    dump(graph, artifacts["graph"])
    artifacts["findings"].write_text(
        analyses.findings_to_json(findings) + "\n", encoding="utf-8"
    )
    artifacts["stats"].write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    # timings vary run to run; they live in the log, never in the artifacts
    with open(out / "lift.log", "a", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {
                    "input": ingested.name,
                    "kind": ingested.kind,
                    "timings_ms": {
                        k: round(v * 1000, 3) for k, v in timings.items()
                    },
                },
                sort_keys=True,
            )
            + "\n"
        )
    log.info("wrote %s", ", ".join(str(p) for p in artifacts.values()))

    exit_code = 1 if by_severity["critical"] else 0
    return PipelineResult(
        graph=graph,
        findings=findings,
        stats=stats,
        exit_code=exit_code,
        artifacts={k: str(v) for k, v in artifacts.items()},
    )
