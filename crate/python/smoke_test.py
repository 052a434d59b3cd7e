"""Smoke test for the swintext Python extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/swintext-*.whl
or, with a virtualenv active:
    maturin develop --release -m crates/python/Cargo.toml

Then run `python python/smoke_test.py [checkpoint.stun]`. Without a
checkpoint only the checkpoint-free functions are exercised.
"""

import math
import os
import sys
import tempfile

import swintext


def main() -> int:
    e = swintext.stub_embedding("the blob in the upper left", 64)
    assert len(e) == 64
    assert math.isclose(sum(x * x for x in e), 1.0, rel_tol=1e-12)
    assert swintext.stub_embedding("the blob in the upper left", 64) == e

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "prompts.ctxe")
        swintext.write_ctxe(path, 64, [("upper left", [float(x) for x in e])])
        dim, records = swintext.read_ctxe(path)
        assert dim == 64 and len(records) == 1 and records[0][0] == "upper left"

    dice, iou = swintext.dice_iou([1, 1, 0, 0], [1, 0, 0, 0])
    assert math.isclose(dice, 2 * iou / (1 + iou), rel_tol=1e-12)
    print(f"dice_iou ok: dice={dice:.4f} iou={iou:.4f}")

    if len(sys.argv) > 1:
        seg = swintext.Segmenter(sys.argv[1])
        emb = swintext.stub_embedding("the blob in the upper left", seg.text_dim)
        w, h = 40, 30
        pixels = [(x * 7 + y * 3) % 256 for y in range(h) for x in range(w)]
        mask = seg.predict(pixels, w, h, emb)
        assert len(mask) == w * h and set(mask) <= {0, 1}
        assert seg.predict(pixels, w, h, emb) == mask
        print(f"{seg.variant}: {sum(mask)} foreground pixels of {w * h}")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
