"""Regenerate the bundled 256x256 greyscale test images from scikit-image's
sample data (public-domain / CC0 sources)."""
import pathlib

import numpy as np
from skimage import color, data, transform

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "images"
SOURCES = ["camera", "moon", "astronaut", "coffee", "chelsea"]


def to_grey_square(img):
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3])
    else:
        img = img.astype(np.float64) / 255.0
    h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[top:top + side, left:left + side]
    img = transform.resize(img, (256, 256), anti_aliasing=True)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img):
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name in SOURCES:
        write_pgm(OUT / f"{name}.pgm", to_grey_square(getattr(data, name)()))
        print("wrote", name)
