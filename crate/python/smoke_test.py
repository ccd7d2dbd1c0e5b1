"""Smoke test for the geoflow Python extension.

Build first with `cargo build -p geoflow-py` (add --release to test the
release build), then run `python3 python/smoke_test.py`. Set GEOFLOW_LIB
to point at a specific shared library.
"""

import importlib.util
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def find_library():
    if os.environ.get("GEOFLOW_LIB"):
        return pathlib.Path(os.environ["GEOFLOW_LIB"])
    for profile in ("debug", "release"):
        for name in ("libgeoflow.so", "libgeoflow.dylib", "geoflow.dll"):
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("geoflow extension not built; run `cargo build -p geoflow-py`")


def load(tmp):
    lib = find_library()
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    target = pathlib.Path(tmp) / ("geoflow" + suffix)
    shutil.copyfile(lib, target)
    spec = importlib.util.spec_from_file_location("geoflow", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as tmp:
        gf = load(tmp)

        assert gf.fnv1a64(b"") == 0xCBF29CE484222325
        assert gf.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        v = gf.embed("normalized difference vegetation index")
        assert len(v) == 256
        assert abs(sum(x * x for x in v) - 1.0) < 1e-9
        assert abs(gf.cosine(v, v) - 1.0) < 1e-9

        idx = gf.VectorIndex()
        idx.add("ndvi", "function_tool", "compute NDVI from red and NIR bands")
        idx.add("slope", "function_tool", "terrain slope from a DEM")
        assert len(idx) == 2
        assert idx.query("NDVI red NIR", 1)[0][0] == "ndvi"

        chunks = gf.chunk_document("doc", "x" * 2000, 800, 100)
        assert [c["ordinal"] for c in chunks] == list(range(len(chunks)))

        dag = {
            "nodes": [
                {"id": "a", "purpose": "a", "stage": "data_preparation",
                 "outputs": [{"name": "x", "kind": "raster", "binding": "nodes/a/x.asc"}]},
                {"id": "b", "purpose": "b", "stage": "feature_extraction",
                 "inputs": [{"name": "x", "kind": "raster", "binding": "nodes/a/x.asc"}]},
            ],
            "edges": [["a", "b"], ["b", "a"]],
        }
        report = gf.validate_dag(dag)
        assert not report["ok"] and any("cycle" in v for v in report["violations"])

        assert gf.within_tolerance(0.4205, 0.42)
        assert not gf.within_tolerance(0.50, 0.42)

        cases = os.path.join(tmp, "cases")
        written = gf.write_corpus(cases)
        assert len(written) == 12
        grid = gf.read_ascii_grid(os.path.join(written[0], "inputs", "swir.asc"))
        assert grid["stats"]["crs"] == "EPSG:32650"

        rules = gf.default_rules_for("ndvi", "ndvi")
        missing = gf.evaluate_rules(None, rules, tmp)
        assert not missing["pass"]

        out = os.path.join(tmp, "out")
        report = gf.run_bench(cases, out, "stage_wise")
        acc = {s: m["accuracy"] for s, m in report["per_stage"].items()}
        print("stage-wise accuracy:", acc)
        assert all(a == 1.0 for a in acc.values())
        run_dir = os.path.join(out, "runs", os.path.basename(written[0]) + "-data_preparation")
        events = gf.load_ledger(run_dir)
        assert [e["seq"] for e in events] == list(range(1, len(events) + 1))

        try:
            gf.load_ledger(os.path.join(tmp, "nope"))
        except gf.GeoflowError:
            pass
        else:
            raise AssertionError("expected GeoflowError")
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
