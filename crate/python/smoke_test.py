"""Smoke test for the `flim` extension module.

Uses an installed `flim` package (e.g. from `maturin develop`) when one is
importable; otherwise loads the library built by
`cargo build --release -p flim-python`, or the path given as argument.
"""

import importlib.util
import json
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module(lib):
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / "flim.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("flim", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def find_library():
    if len(sys.argv) > 1:
        return pathlib.Path(sys.argv[1])
    for profile in ("release", "debug"):
        for name in ("libflim.so", "libflim.dylib", "flim.dll"):
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("libflim not found; run `cargo build --release -p flim-python`")


def main():
    if len(sys.argv) == 1 and importlib.util.find_spec("flim") is not None:
        import flim
    else:
        flim = load_module(find_library())

    L, a, b = flim.rgb_to_lab(255, 255, 255)
    assert abs(L - 100) < 1e-6 and abs(a) < 1e-6 and abs(b) < 1e-6, (L, a, b)

    strokes = [{"id": 1, "points": [[2.0, 2.0], [6.0, 2.0]], "radius": 1.0, "label": 1}]
    pixels = flim.rasterize("img", json.dumps(strokes), 16, 16)
    assert (4, 2, 1) in pixels and all(lbl == 1 for _, _, lbl in pixels)
    try:
        flim.rasterize("img", json.dumps([dict(strokes[0], points=[[99.0, 99.0]])]), 16, 16)
        raise AssertionError("expected an error for a stroke outside the image")
    except flim.FlimError as e:
        assert e.args[0] == "EmptyStrokeError", e.args

    work = pathlib.Path(tempfile.mkdtemp())
    data = work / "data"
    marked = flim.synth(str(data), per_class=20, size=32, seed=3)
    assert len(marked) == 4

    config = (ROOT / "configs" / "synthetic.json").read_text()
    net = flim.Network.learn(str(data), str(data / "markers"), config, seed=1)
    assert net.filters() == [16], net.filters()
    net.save(str(work / "network.bin"))
    net = flim.Network.load(str(work / "network.bin"))

    images = sorted(p for d in ("1", "2") for p in (data / d).glob("*.png"))
    labels = [int(p.parent.name) for p in images]
    feats = net.extract_many([str(p) for p in images])
    assert len(feats) == 40 and len(feats[0]) == 8 * 8 * 16
    assert feats[0] == net.extract(str(images[0]))

    train = list(range(0, 40, 2))
    test = list(range(1, 40, 2))
    svm = flim.Svm.train([feats[i] for i in train], [labels[i] for i in train], c=0.01)
    assert svm.classes == [1, 2]
    pred = svm.predict([feats[i] for i in test])
    m = flim.evaluate(pred, [labels[i] for i in test], 1)
    assert 0.0 <= m["f_score"] <= 1.0 and sum(m["confusion"].values()) == 20

    points = flim.tsne(feats[:12], perplexity=3.0, iterations=250, seed=0)
    assert len(points) == 12

    print(f"flim smoke test OK (f-score {m['f_score']:.3f})")
    shutil.rmtree(work, ignore_errors=True)


if __name__ == "__main__":
    main()
