import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))


def lift_fixture(blob, manifest):
    """Parse a fixture binary and decode every function the manifest names."""
    from lios.disasm import build_function
    from lios.macho import parse_macho
    from lios.objc import load_model

    image = parse_macho(blob)
    model = load_model(image)
    functions = {}
    for _name, (start, end) in manifest["function_ranges"].items():
        functions[start] = build_function(image, start, end, model=model)
    return image, model, functions


def graph_bundle(builder, linked=False, **kwargs):
    """Lift a corpus fixture and assemble its graph, optionally with passes."""
    from lios.graph import build_from_frontends, link_pass, mark_entrypoints

    blob, manifest = builder(**kwargs)
    image, model, functions = lift_fixture(blob, manifest)
    g = build_from_frontends(image, model, functions)
    if linked:
        link_pass(g)
        mark_entrypoints(g)
    return manifest, image, model, functions, g
