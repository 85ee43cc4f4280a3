"""Smoke test for the see_bench extension module.

Build first:
    cargo build -p see-py --features extension-module --release
then run:
    python3 python/smoke_test.py

If see_bench is not installed, the freshly built shared library is loaded
from target/release (or target/debug).
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import see_bench

        return see_bench
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libsee_bench.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            dst = os.path.join(tmp, "see_bench.so")
            shutil.copy(lib, dst)
            spec = importlib.util.spec_from_file_location("see_bench", dst)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("see_bench not found; build it with --features extension-module")


def main():
    sb = load()

    catalog = sb.Catalog()
    assert len(catalog) == 11 + 79 + 79 * 63, len(catalog)
    assert len(catalog.superclasses()) == 11
    assert catalog.level("cup") == "object"
    erase = catalog.erase_list("cup")
    assert erase[0] == "cup" and len(erase) == 64

    corpus = sb.Corpus()
    assert len(corpus) == 5056
    first = corpus.records()[0]
    assert first[1].startswith("An image of "), first

    small = sb.Corpus(["cup", "car"])
    assert len(small) == 128

    assert sb.render_question("red car") == "Is there a red car in the image?"
    assert sb.edit_distance("small red car", "large red car") == 1
    assert sb.edit_distance("car", "small red wooden car") == 3
    try:
        sb.edit_distance("car", "cup")
        raise AssertionError("cross-object distance accepted")
    except ValueError:
        pass

    assert abs(sb.embedding_similarity("cup", "cup") - 1.0) < 1e-9
    assert abs(sb.spread([[1.0, 1.0], [1.0, 1.0]]) - 1.0) < 1e-9
    assert sb.spread([[0.0, 0.0], [0.0, 5.0]]) == 0.0
    assert abs(sb.pearson([1, 2, 3], [2, 4, 6]) - 1.0) < 1e-12
    assert sb.pearson([1, 1, 1], [1, 2, 3]) is None

    out = tempfile.mkdtemp()
    config = f"""
seeds = [0, 1]

[cets.UCE]
kind = "mock"
scope = "subtree"

[corpus]
objects = ["cup", "bowl", "car", "truck"]

[output]
dir = "{out}"
"""
    run_dir = sb.run(config, "neighbors")
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["run_id"].startswith("neighbors-")
    with open(os.path.join(run_dir, "summary.csv")) as fh:
        rows = [line.split(",") for line in fh.read().splitlines()[1:]]
    erase_all = [r for r in rows if r[1] == "UCE" and r[2] == "neighbor_erase" and r[3] == "all"]
    assert erase_all and all(math.isclose(float(r[6]), 0.0) for r in erase_all), erase_all

    print("see_bench smoke test: ok")


if __name__ == "__main__":
    main()
