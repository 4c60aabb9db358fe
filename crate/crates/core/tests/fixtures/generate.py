"""Regenerate the baseline golden fixtures with numpy/scipy.

    python3 tests/fixtures/generate.py

Inputs are random u8 images; outputs are computed in float64 from x / 255
and quantized as floor(255 * v + 0.5).
"""
import pathlib
import struct

import numpy as np
from scipy import ndimage

HERE = pathlib.Path(__file__).parent


def write_images(path, imgs):
    n, h, w = imgs.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + imgs.astype(np.uint8).tobytes())


def write_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) + np.asarray(labels, np.uint8).tobytes())


def quantize(x):
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def pixelate(img, block):
    h, w = img.shape
    out = np.empty_like(img)
    for y in range(0, h, block):
        for x in range(0, w, block):
            out[y:y + block, x:x + block] = img[y:y + block, x:x + block].mean()
    return out


def blur(img, sigma):
    return ndimage.gaussian_filter(img, sigma=sigma, truncate=3.0, mode="reflect")


def main():
    rng = np.random.default_rng(20240607)
    for name, (n, h, w) in {"square": (4, 28, 28), "ragged": (3, 10, 13)}.items():
        raw = rng.integers(0, 256, size=(n, h, w), dtype=np.uint8)
        x = raw.astype(np.float64) / 255.0
        write_images(HERE / f"{name}.images.idx3-ubyte", raw)
        write_labels(HERE / f"{name}.labels.idx1-ubyte", list(range(n)))
        for block in (2, 3):
            out = np.stack([pixelate(im, block) for im in x])
            write_images(HERE / f"{name}.pixelate{block}.idx3-ubyte", quantize(out))
        for sigma in (1.0, 1.5):
            out = np.stack([blur(im, sigma) for im in x])
            write_images(HERE / f"{name}.blur{sigma}.idx3-ubyte", quantize(out))


if __name__ == "__main__":
    main()
