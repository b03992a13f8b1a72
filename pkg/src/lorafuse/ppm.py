"""Binary P6 PPM reader/writer for palette-indexed images.

Images are stored expanded to 24-bit RGB; reading maps RGB triples back
to palette indices and fails loudly on colors outside the palette.
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, img: np.ndarray, palette_rgb) -> None:
    """Write an H x W palette-index image as binary P6."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected an H x W index image, got shape {img.shape}")
    lut = np.asarray(palette_rgb, dtype=np.uint8)
    if img.max(initial=0) >= len(lut):
        raise ValueError("image contains indices outside the palette")
    h, w = img.shape
    rgb = lut[img]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def _read_header_token(f) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path, palette_rgb) -> np.ndarray:
    """Read a binary P6 file back into palette indices."""
    lut = {tuple(int(v) for v in c): i for i, c in enumerate(palette_rgb)}
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise ValueError(f"not a binary PPM file: magic {magic!r}")
        w = int(_read_header_token(f))
        h = int(_read_header_token(f))
        maxval = int(_read_header_token(f))
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    rgb = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    img = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            key = (int(rgb[r, c, 0]), int(rgb[r, c, 1]), int(rgb[r, c, 2]))
            if key not in lut:
                raise ValueError(f"pixel ({r},{c}) color {key} is not in the palette")
            img[r, c] = lut[key]
    return img
