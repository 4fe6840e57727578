"""Smoke test for the c3forge Python module.

Build first:  cargo build --release -p c3forge-py
Then run:     python3 crates/py/python/smoke_test.py [checkpoint_dir]
"""

import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, "..", "..", ".."))


def import_module():
    try:
        import c3forge  # noqa: F401
        return sys.modules["c3forge"]
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libc3forge_py.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "c3forge.so"))
            sys.path.insert(0, tmp)
            import c3forge
            return c3forge
    sys.exit("libc3forge_py.so not found; run `cargo build --release -p c3forge-py`")


def main():
    c3 = import_module()

    ex = c3.generate_example(3)
    assert ex.sample_rate == c3.SAMPLE_RATE
    assert len(ex.audio) >= c3.SAMPLE_RATE
    assert ex.caption and len(ex.onsets) == len(ex.kinds)
    print("example:", ex.caption, ex.onsets)

    found = c3.onsets(ex.audio)
    print("detected onsets:", [round(t, 3) for t, _ in found])

    mel = c3.mel(ex.audio)
    assert mel and len(mel[0]) == 64

    refs = ["a steady tone plays", "a click train plays"]
    assert abs(c3.cider(refs, refs) - 10.0) < 1e-6

    v = c3.Vocab()
    assert v.decode_text(v.encode_text("a rising chirp")) == "a rising chirp"
    assert v.ids_to_acoustic(v.acoustic_to_ids([0, 5, 255])) == [0, 5, 255]

    codec = c3.Codec.untrained(0)
    layers = codec.tokenize(ex.audio[: codec.hop * 10])
    assert len(layers) == 2 and len(layers[0]) == 10
    out = codec.detokenize(layers)
    assert len(out) == codec.hop * 10

    try:
        c3.Pipeline.load(os.path.join(tempfile.mkdtemp(), "none"))
        raise AssertionError("loading a missing checkpoint should fail")
    except FileNotFoundError:
        pass

    ckpt = sys.argv[1] if len(sys.argv) > 1 else None
    if ckpt:
        p = c3.Pipeline.load(ckpt)
        audio, toks = p.generate_t2a("a steady tone plays", seed=7)
        print("t2a:", len(audio), "samples,", len(toks[0]), "frames")
        print("caption of example:", p.caption(ex.audio))
    print("smoke test ok")


if __name__ == "__main__":
    main()
