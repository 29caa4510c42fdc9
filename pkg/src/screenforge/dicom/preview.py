"""Windowed 8-bit grayscale rendering of stored pixel data.

Stored pixels are mapped to modality values with the rescale pair, then
through the linear window:

    y = round(255 * clamp((v - (WC - WW/2)) / WW, 0, 1))

with round-half-up ties. PGM output is the bit-exact reference format; PNG
carries the identical pixel bytes for browsers.
"""

from __future__ import annotations

from dataclasses import dataclass
from io import BytesIO

import numpy as np
from PIL import Image

from .dataset import DicomError, DicomFile, get_value
from .tags import Tag

_ROWS = Tag(0x0028, 0x0010)
_COLS = Tag(0x0028, 0x0011)
_BITS_ALLOCATED = Tag(0x0028, 0x0100)
_BITS_STORED = Tag(0x0028, 0x0101)
_PIXEL_REPRESENTATION = Tag(0x0028, 0x0103)
_PHOTOMETRIC = Tag(0x0028, 0x0004)
_SAMPLES_PER_PIXEL = Tag(0x0028, 0x0002)
_FRAMES = Tag(0x0028, 0x0008)
_SLOPE = Tag(0x0028, 0x1053)
_INTERCEPT = Tag(0x0028, 0x1052)
_PIXEL_DATA = Tag(0x7FE0, 0x0010)


class UnsupportedPixels(DicomError):
    code = "UNSUPPORTED_PIXELS"


class BadWindow(DicomError):
    code = "BAD_WINDOW"


@dataclass(frozen=True)
class PixelDescriptor:
    rows: int
    cols: int
    bits_allocated: int
    bits_stored: int
    signed: bool
    photometric: str
    rescale_slope: float
    rescale_intercept: float
    frames: int

    @property
    def frame_bytes(self) -> int:
        return self.rows * self.cols * (self.bits_allocated // 8)


def pixel_descriptor(f: DicomFile) -> PixelDescriptor:
    rows = get_value(f, _ROWS)
    cols = get_value(f, _COLS)
    if not rows or not cols:
        raise UnsupportedPixels("missing Rows/Columns")
    bits_allocated = get_value(f, _BITS_ALLOCATED) or 16
    if bits_allocated not in (8, 16):
        raise UnsupportedPixels(f"bits allocated {bits_allocated} not in (8, 16)")
    bits_stored = get_value(f, _BITS_STORED) or bits_allocated
    if bits_stored > bits_allocated:
        raise UnsupportedPixels(f"bits stored {bits_stored} exceeds allocated {bits_allocated}")
    photometric = get_value(f, _PHOTOMETRIC) or ""
    samples = get_value(f, _SAMPLES_PER_PIXEL) or 1
    if samples != 1:
        raise UnsupportedPixels(f"{samples} samples per pixel; only grayscale is supported")
    frames = int(get_value(f, _FRAMES) or 1)
    slope = get_value(f, _SLOPE)
    intercept = get_value(f, _INTERCEPT)
    return PixelDescriptor(
        rows=rows, cols=cols, bits_allocated=bits_allocated, bits_stored=bits_stored,
        signed=bool(get_value(f, _PIXEL_REPRESENTATION) or 0), photometric=photometric,
        rescale_slope=float(slope if slope is not None else 1.0),
        rescale_intercept=float(intercept if intercept is not None else 0.0),
        frames=frames,
    )


def stored_pixels(f: DicomFile) -> np.ndarray:
    """Frame 0 of the stored pixel array, shaped (rows, cols)."""
    desc = pixel_descriptor(f)
    if desc.photometric != "MONOCHROME2":
        raise UnsupportedPixels(
            f"photometric interpretation {desc.photometric or '(missing)'} is not MONOCHROME2")
    el = f.dataset.get(_PIXEL_DATA)
    if el is None or el.vr == "SQ":
        raise UnsupportedPixels("no uncompressed pixel data element")
    raw = el.value
    expected = desc.frame_bytes * desc.frames
    if len(raw) < expected:
        raise UnsupportedPixels(
            f"pixel data holds {len(raw)} bytes, geometry needs {expected}")
    dtype = {(8, False): np.uint8, (8, True): np.int8,
             (16, False): np.dtype("<u2"), (16, True): np.dtype("<i2")}[
        (desc.bits_allocated, desc.signed)]
    frame = np.frombuffer(raw[: desc.frame_bytes], dtype=dtype)
    return frame.reshape((desc.rows, desc.cols))


def render_preview(f: DicomFile, window_center: float, window_width: float) -> np.ndarray:
    """8-bit grayscale array for frame 0 under the given window."""
    if window_width < 1:
        raise BadWindow(f"window width must be >= 1, got {window_width}")
    desc = pixel_descriptor(f)
    pixels = stored_pixels(f).astype(np.float64)
    v = pixels * desc.rescale_slope + desc.rescale_intercept
    t = np.clip((v - (window_center - window_width / 2.0)) / window_width, 0.0, 1.0)
    return np.floor(255.0 * t + 0.5).astype(np.uint8)


def to_pgm(image: np.ndarray) -> bytes:
    h, w = image.shape
    return b"P5\n%d %d\n255\n" % (w, h) + image.tobytes()


def to_png(image: np.ndarray) -> bytes:
    buf = BytesIO()
    Image.fromarray(image, mode="L").save(buf, format="PNG")
    return buf.getvalue()
