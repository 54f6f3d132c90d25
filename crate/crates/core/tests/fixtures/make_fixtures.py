"""Writes the reference netpbm files with Pillow.

    python3 make_fixtures.py
"""
from pathlib import Path

from PIL import Image

HERE = Path(__file__).parent
W, H = 7, 5


def rgb(x, y):
    return ((x * 37 + y * 11) % 256, (x * 5 + y * 53 + 7) % 256, (255 - x * 29 - y * 3) % 256)


def label(x, y):
    return 255 if (x + y) % 4 == 3 else (x * 3 + y) % 5


img = Image.new("RGB", (W, H))
img.putdata([rgb(x, y) for y in range(H) for x in range(W)])
img.save(HERE / "pillow_7x5.ppm")

lab = Image.new("L", (W, H))
lab.putdata([label(x, y) for y in range(H) for x in range(W)])
lab.save(HERE / "pillow_7x5.pgm")
