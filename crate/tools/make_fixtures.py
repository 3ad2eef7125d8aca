#!/usr/bin/env python3
"""Regenerate the JPEG test fixtures under crates/core/tests/data.

Requires Pillow, scikit-image, scikit-learn and matplotlib (for their bundled
sample photographs) plus a C compiler with libjpeg headers. Every JPEG is
produced by libjpeg through tools/jpegtool.c. libjpeg's own coefficient dump
of every JPEG is hashed into `coef_digests.txt` for cross-checking the Rust
parser; the full `.coef` dumps are kept only for the synthetic files.
"""
import hashlib
import os
import subprocess
import sys
import tempfile

import numpy as np
from PIL import Image

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "crates", "core", "tests", "data")


def sources():
    import matplotlib
    import skimage
    import sklearn

    sk = os.path.join(os.path.dirname(skimage.__file__), "data")
    sl = os.path.join(os.path.dirname(sklearn.__file__), "datasets", "images")
    mp = os.path.join(matplotlib.get_data_path(), "sample_data")
    return {
        "astronaut": os.path.join(sk, "astronaut.png"),
        "camera": os.path.join(sk, "camera.png"),
        "coffee": os.path.join(sk, "coffee.png"),
        "coins": os.path.join(sk, "coins.png"),
        "moon": os.path.join(sk, "moon.png"),
        "motorcycle": os.path.join(sk, "motorcycle_left.png"),
        "rocket": os.path.join(sk, "rocket.jpg"),
        "china": os.path.join(sl, "china.jpg"),
        "brick": os.path.join(sk, "brick.png"),
        "grass": os.path.join(sk, "grass.png"),
        "gravel": os.path.join(sk, "gravel.png"),
        "cell": os.path.join(sk, "cell.png"),
        # held-out sources
        "chelsea": os.path.join(sk, "chelsea.png"),
        "flower": os.path.join(sl, "flower.jpg"),
        "hopper": os.path.join(mp, "grace_hopper.jpg"),
        "hubble": os.path.join(sk, "hubble_deep_field.jpg"),
        "ihc": os.path.join(sk, "ihc.png"),
        "clock": os.path.join(sk, "clock_motion.png"),
        "retina": os.path.join(sk, "retina.jpg"),
    }


TRAIN = ["astronaut", "camera", "coffee", "coins", "moon", "motorcycle",
         "rocket", "china", "brick", "grass", "gravel", "cell"]
DIGESTS = []
HELDOUT = ["chelsea", "flower", "hopper", "hubble", "ihc", "clock", "retina"]


def tool():
    exe = os.path.join(tempfile.gettempdir(), "jpegtool")
    subprocess.check_call(["gcc", "-O2", "-o", exe,
                           os.path.join(ROOT, "tools", "jpegtool.c"), "-ljpeg"])
    return exe


def encode(exe, img, path, quality, sampling="444", restart=0):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with tempfile.NamedTemporaryFile(suffix=".pnm", delete=False) as f:
        pnm = f.name
    img.save(pnm)
    subprocess.check_call([exe, "encode", pnm, path, str(quality), sampling, str(restart)])
    os.unlink(pnm)
    coef = path[:-4] + ".coef"
    subprocess.check_call([exe, "dump", path, coef])
    with open(coef, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    DIGESTS.append((os.path.relpath(path, OUT), digest))
    # Full dumps are kept only for the small synthetic files.
    if os.sep + "synthetic" + os.sep not in path:
        os.unlink(coef)


def load(path, scale=2):
    im = Image.open(path).convert("RGB")
    if scale > 1:
        im = im.resize((im.width // scale, im.height // scale), Image.LANCZOS)
    return im


def crops(im, size, count, rng):
    w, h = min(size[0], im.width // 8 * 8), min(size[1], im.height // 8 * 8)
    out = []
    for _ in range(count):
        x = int(rng.integers(0, max(1, im.width - w + 1)))
        y = int(rng.integers(0, max(1, im.height - h + 1)))
        out.append(im.crop((x, y, x + w, y + h)))
    return out


def main():
    import shutil
    shutil.rmtree(OUT, ignore_errors=True)
    exe = tool()
    src = sources()
    rng = np.random.default_rng(20240515)

    # Grayscale quality-95 training corpus: 24 crops of 256x256 (or whole image).
    for name in TRAIN:
        im = load(src[name])
        for i, c in enumerate(crops(im, (256, 256), 2, rng)):
            encode(exe, c.convert("L"), os.path.join(OUT, "train", f"{name}_{i}.jpg"), 95)

    # Held-out grayscale corpus (and its quality sweep).
    held = []
    for name in HELDOUT:
        im = load(src[name])
        count = 2 if name in ("chelsea", "flower", "hopper") else 1
        held += [(f"{name}_{i}", c.convert("L")) for i, c in enumerate(crops(im, (128, 128), count, rng))]
    for tag, c in held:
        encode(exe, c, os.path.join(OUT, "heldout", f"{tag}.jpg"), 95)
    for q in (55, 65, 75, 85, 95):
        for tag, c in held[:4]:
            encode(exe, c, os.path.join(OUT, "qp", f"q{q}", f"{tag}.jpg"), q)

    # Real photographs in every supported layout for the losslessness gate.
    layouts = [("gray", "444"), ("444", "444"), ("420", "420")]
    real = ["astronaut", "chelsea", "coffee", "flower", "hopper", "rocket",
            "china", "ihc", "motorcycle", "hubble", "camera", "moon"]
    for i, name in enumerate(real):
        im = load(src[name])
        w, h = 120 + 8 * (i % 4) + (i % 3), 96 + 8 * (i % 5) + (i % 2)
        (c,) = crops(im, (w, h), 1, rng)
        kind, sampling = layouts[i % 3]
        q = (55, 75, 95)[(i // 3) % 3]
        restart = 4 if i % 4 == 1 else 0
        if kind == "gray":
            c = c.convert("L")
        encode(exe, c, os.path.join(OUT, "real", f"{name}_{kind}_q{q}_r{restart}.jpg"), q, sampling, restart)

    # Small synthetic fixtures.
    gray16 = Image.fromarray((np.add.outer(np.arange(16), np.arange(16)) * 8).astype(np.uint8), "L")
    encode(exe, gray16, os.path.join(OUT, "synthetic", "gradient16_q95.jpg"), 95)
    flat8 = Image.fromarray(np.full((8, 8), 100, np.uint8), "L")
    encode(exe, flat8, os.path.join(OUT, "synthetic", "flat8_q95.jpg"), 95)
    for i in range(6):
        noise = rng.integers(0, 256, size=(40 + 8 * i, 56 + 4 * i, 3), dtype=np.uint8)
        img = Image.fromarray(noise, "RGB")
        sampling = "420" if i % 2 else "444"
        encode(exe, img, os.path.join(OUT, "synthetic", f"noise{i}_{sampling}.jpg"), (95, 75, 100)[i % 3], sampling, i % 3)

    # Progressive file, which the parser must reject.
    os.makedirs(os.path.join(OUT, "unsupported"), exist_ok=True)
    load(src["camera"]).crop((0, 0, 64, 64)).save(
        os.path.join(OUT, "unsupported", "progressive.jpg"), quality=90, progressive=True)

    with open(os.path.join(OUT, "coef_digests.txt"), "w") as f:
        for rel, digest in sorted(DIGESTS):
            f.write(f"{rel} {digest}\n")


if __name__ == "__main__":
    sys.exit(main())
