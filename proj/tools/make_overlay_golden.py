"""Reference render for the overlay structural-similarity test.

Base image: pixel (y, x, c) = (3x + 2y + 50c) mod 256. Heat: 8-pixel
checkerboard alternating 0.9 and 0.2. Overlay per pixel: alpha = 0.5 * heat,
out = (1 - alpha) * base + alpha * 255 * jet_r(heat), using matplotlib's jet.

    python tools/make_overlay_golden.py [--out tests/data]
"""

import argparse
import os

import numpy as np
from matplotlib import colormaps
from PIL import Image

SIDE = 64
CELL = 8
BLEND = 0.5


def base_image():
    y, x, c = np.meshgrid(np.arange(SIDE), np.arange(SIDE), np.arange(3), indexing="ij")
    return ((3 * x + 2 * y + 50 * c) % 256).astype(np.float64)


def heat():
    y, x = np.meshgrid(np.arange(SIDE), np.arange(SIDE), indexing="ij")
    return np.where(((y // CELL) + (x // CELL)) % 2 == 0, 0.9, 0.2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "tests", "data"))
    args = ap.parse_args()
    h = heat()
    rgb = colormaps["jet_r"](h)[..., :3]
    alpha = (BLEND * h)[..., None]
    out = (1 - alpha) * base_image() + alpha * 255.0 * rgb
    img = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(os.path.join(args.out, "overlay_checkerboard.png"))


if __name__ == "__main__":
    main()
