"""Regenerates the checked-in fixtures: scene.png, three_rects.json, game2.json.

RLE is computed here independently of the Rust encoder (column-major,
zero-run first), so loading these files exercises the decoder against an
outside implementation.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).resolve().parent
H = W = 64

RECTS = [
    ("red_block", (4, 24, 4, 28)),
    ("green_bar", (32, 56, 6, 22)),
    ("blue_block", (10, 50, 36, 60)),
]
COLOURS = [(220, 40, 40), (40, 200, 60), (40, 60, 220)]


def rle(mask):
    flat = mask.T.reshape(-1)  # column-major
    counts, current, run = [], 0, 0
    for v in flat:
        if v != current:
            counts.append(run)
            current, run = v, 0
        run += 1
    counts.append(run)
    return counts


def main():
    rng = np.random.default_rng(2024)
    yy, xx = np.mgrid[0:H, 0:W]
    img = np.stack([xx * 2, yy * 2, (xx + yy)], axis=-1).astype(np.float64) + 40
    concepts = []
    for k, ((name, (r0, r1, c0, c1)), colour) in enumerate(zip(RECTS, COLOURS)):
        mask = np.zeros((H, W), dtype=np.uint8)
        mask[r0:r1, c0:c1] = 1
        img[r0:r1, c0:c1] = colour
        counts = rle(mask)
        assert sum(counts) == H * W
        concepts.append({"id": k, "name": name, "rle": {"size": [H, W], "counts": counts}})
    img += rng.integers(-12, 13, size=img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(HERE / "scene.png")

    manifest = {"image": {"width": W, "height": H, "path": "scene.png"}, "concepts": concepts}
    (HERE / "three_rects.json").write_text(json.dumps(manifest, indent=2) + "\n")

    game = {"n": 2, "utilities": [0.0, 0.6, 0.2, 1.0]}
    (HERE / "game2.json").write_text(json.dumps(game, indent=2) + "\n")


if __name__ == "__main__":
    main()
