"""Regenerate the grayscale PGM fixtures from scikit-image's bundled sample photos."""
import os
import sys

import numpy as np
from PIL import Image
import skimage

SRC = os.path.join(os.path.dirname(skimage.__file__), "data")
OUT = sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures"


def gray(name):
    img = Image.open(os.path.join(SRC, name))
    if img.mode != "L":
        img = img.convert("L")
    return img


def save(img, name):
    arr = np.asarray(img, dtype=np.uint8)
    h, w = arr.shape
    with open(os.path.join(OUT, name), "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def main():
    os.makedirs(OUT, exist_ok=True)
    camera = gray("camera.png")
    astronaut = gray("astronaut.png")
    chelsea = gray("chelsea.png")
    save(camera.crop((150, 60, 278, 188)), "camera_crop128.pgm")
    save(astronaut.crop((160, 40, 288, 168)), "astronaut_crop128.pgm")
    save(chelsea.crop((150, 60, 278, 188)), "chelsea_crop128.pgm")


if __name__ == "__main__":
    main()
