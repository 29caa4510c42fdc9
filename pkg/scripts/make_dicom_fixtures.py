#!/usr/bin/env python3
"""Author the frozen DICOM fixture corpus under tests/fixtures/dicom/.

Run once from the repository root; outputs are committed and treated as
frozen. Uses the reference writer in tests/dicom_oracle.py, never the
production codec, so fixture bytes and expected dumps stay independent.
"""

import json
import math
import struct
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from dicom_oracle import (  # noqa: E402
    TS_EXPLICIT,
    TS_IMPLICIT,
    TS_JPEG_LOSSLESS,
    expected_dump,
    txt,
    write_part10,
)

OUT = ROOT / "tests" / "fixtures" / "dicom"


def u16s(*values: int) -> bytes:
    return b"".join(struct.pack("<H", v) for v in values)


def ct_identity():
    return [
        (0x0008, 0x0016, "UI", txt("1.2.840.10008.5.1.4.1.1.2")),
        (0x0008, 0x0018, "UI", txt("1.2.392.200036.9116.2.5.1.48.9999.1")),
        (0x0008, 0x0020, "DA", txt("20240601")),
        (0x0008, 0x0050, "SH", txt("A-2024-0001")),
        (0x0008, 0x0060, "CS", txt("CT")),
        (0x0008, 0x0080, "LO", txt("City Clinical Hospital 9")),
        (0x0008, 0x0090, "PN", txt("Ivanov^Petr^Sergeevich")),
        (0x0010, 0x0010, "PN", txt("Doe^Jane")),
        (0x0010, 0x0020, "LO", txt("1007")),
        (0x0010, 0x0030, "DA", txt("19620305")),
        (0x0010, 0x0040, "CS", txt("F")),
        (0x0010, 0x2154, "SH", txt("+79000000000")),
        (0x0020, 0x000D, "UI", txt("1.2.392.200036.9116.2.5.1.48.9999.100")),
        (0x0020, 0x000E, "UI", txt("1.2.392.200036.9116.2.5.1.48.9999.200")),
        (0x0020, 0x0052, "UI", txt("1.2.392.200036.9116.2.5.1.48.9999.300")),
    ]


def gradient_pixels(rows: int, cols: int, *, signed=False, frames=1) -> bytes:
    out = bytearray()
    for f in range(frames):
        for r in range(rows):
            for c in range(cols):
                v = (r * cols + c + f * 17) % 4096
                if signed:
                    out += struct.pack("<h", v - 1024)
                else:
                    out += struct.pack("<H", v)
    return bytes(out)


def pixel_module(rows, cols, *, bits=16, signed=False, frames=1,
                 photometric="MONOCHROME2", slope="1", intercept="0"):
    els = [
        (0x0028, 0x0002, "US", u16s(1)),
        (0x0028, 0x0004, "CS", txt(photometric)),
        (0x0028, 0x0010, "US", u16s(rows)),
        (0x0028, 0x0011, "US", u16s(cols)),
        (0x0028, 0x0100, "US", u16s(bits)),
        (0x0028, 0x0101, "US", u16s(12 if bits == 16 else 8)),
        (0x0028, 0x0102, "US", u16s(11 if bits == 16 else 7)),
        (0x0028, 0x0103, "US", u16s(1 if signed else 0)),
        (0x0028, 0x1052, "DS", txt(intercept)),
        (0x0028, 0x1053, "DS", txt(slope)),
    ]
    if frames > 1:
        els.insert(2, (0x0028, 0x0008, "IS", txt(str(frames))))
    if bits == 8:
        value = bytes((r * cols + c) % 256 for r in range(rows) for c in range(cols))
        els.append((0x7FE0, 0x0010, "OB", value))
    else:
        els.append((0x7FE0, 0x0010, "OW",
                    gradient_pixels(rows, cols, signed=signed, frames=frames)))
    return els


def sq_item(n: int):
    return [
        (0x0008, 0x0016, "UI", txt("1.2.840.10008.5.1.4.1.1.2")),
        (0x0008, 0x0018, "UI", txt(f"1.2.392.200036.9116.2.5.1.48.9999.{400 + n}")),
    ]


def fixtures():
    basic = ct_identity()
    wc_ww = [(0x0028, 0x1050, "DS", txt("40")), (0x0028, 0x1051, "DS", txt("400"))]

    yield "ct_basic_explicit", TS_EXPLICIT, basic
    yield "ct_basic_implicit", TS_IMPLICIT, basic
    yield ("ct_gradient_16bit", TS_EXPLICIT,
           _merge(basic, pixel_module(32, 32), wc_ww))
    yield ("ct_signed_pixels", TS_EXPLICIT,
           _merge(basic, pixel_module(24, 24, signed=True, intercept="-1024"), wc_ww))
    yield "ct_8bit", TS_EXPLICIT, _merge(basic, pixel_module(16, 16, bits=8))
    yield ("ct_multiframe", TS_EXPLICIT,
           _merge(basic, pixel_module(16, 16, frames=3), wc_ww))
    yield ("ct_rescaled_implicit", TS_IMPLICIT,
           _merge(basic, pixel_module(16, 16, slope="2", intercept="-100"), wc_ww))
    yield "mono1_parses", TS_EXPLICIT, _merge(
        basic, pixel_module(8, 8, bits=8, photometric="MONOCHROME1"))

    yield ("sq_defined_explicit", TS_EXPLICIT,
           _merge(basic, [(0x0008, 0x1140, "SQ", [sq_item(1)])]))
    yield ("sq_undefined_explicit", TS_EXPLICIT,
           _merge(basic, [(0x0008, 0x1140, "SQ!", [sq_item(1), sq_item(2)])]))
    yield ("sq_undefined_implicit", TS_IMPLICIT,
           _merge(basic, [(0x0008, 0x1140, "SQ!", [sq_item(1), sq_item(2)])]))
    yield ("sq_defined_implicit", TS_IMPLICIT,
           _merge(basic, [(0x0008, 0x1140, "SQ", [sq_item(3)])]))
    yield ("sq_nested_explicit", TS_EXPLICIT,
           _merge(basic, [(0x0008, 0x1140, "SQ",
                           [sq_item(4) + [(0x0008, 0x1140, "SQ", [sq_item(5)])]])]))
    yield ("sq_empty_explicit", TS_EXPLICIT,
           _merge(basic, [(0x0008, 0x1140, "SQ", []),
                          (0x0040, 0x0260, "SQ", [[]])]))

    sans_accession = [e for e in ct_identity() if (e[0], e[1]) != (0x0008, 0x0050)]
    yield ("empty_values", TS_EXPLICIT,
           _merge(sans_accession, [(0x0008, 0x0050, "SH", b""),
                                   (0x0010, 0x1000, "LO", b"")]))
    yield ("private_tags_explicit", TS_EXPLICIT,
           _merge(basic, [(0x0009, 0x0010, "LO", txt("VENDOR NINE")),
                          (0x0009, 0x1001, "OB", bytes(range(16)))]))
    yield ("private_tags_implicit", TS_IMPLICIT,
           _merge(basic, [(0x0009, 0x0010, "LO", txt("VENDOR NINE")),
                          (0x0009, 0x1001, "OB", bytes(range(16)))]))
    yield ("odd_length_padding", TS_EXPLICIT,
           _merge(basic, [(0x0008, 0x103E, "LO", txt("chest ct")),
                          (0x0010, 0x1010, "AS", txt("062Y")),
                          (0x0020, 0x0010, "SH", txt("S-1"))]))
    yield ("multivalue_numeric", TS_EXPLICIT,
           _merge(basic, [(0x0020, 0x0032, "DS", txt("-250.0\\-250.0\\62.5")),
                          (0x0020, 0x0037, "DS", txt("1\\0\\0\\0\\1\\0")),
                          (0x0028, 0x0030, "DS", txt("0.703125\\0.703125"))]))
    yield ("text_vr_zoo", TS_EXPLICIT,
           _merge(basic, [(0x0008, 0x0054, "AE", txt("PACS_NODE_1")),
                          (0x0008, 0x002A, "DT", txt("20240601120000.000000")),
                          (0x0008, 0x0081, "ST", txt("10 Hospital St, Wing B")),
                          (0x0010, 0x21B0, "LT", txt("former smoker, 30 pack-years")),
                          (0x0018, 0x5100, "CS", txt("HFS"))]))
    yield ("binary_vr_zoo", TS_EXPLICIT,
           _merge(basic, [(0x0018, 0x6011, "US", u16s(1, 2, 3, 4)),
                          (0x0028, 0x6010, "US", u16s(0x1234)),
                          (0x0040, 0x9211, "SS", struct.pack("<h", -32000)),
                          (0x0040, 0x9212, "FD", struct.pack("<2d", 1.5, -2.25)),
                          (0x0040, 0x9213, "FL", struct.pack("<f", 0.5)),
                          (0x0040, 0x9214, "SL", struct.pack("<i", -70000)),
                          (0x0040, 0x9215, "UL", struct.pack("<I", 3000000000))]))
    yield ("large_text", TS_EXPLICIT,
           _merge(basic, [(0x0010, 0x21B0, "LT",
                           txt("finding " * 40))]))
    yield "meta_only", TS_EXPLICIT, ct_identity()[:2]


def _merge(*element_lists):
    merged = []
    for els in element_lists:
        merged.extend(els)
    merged.sort(key=lambda e: (e[0], e[1]))
    return merged


def window_byte(stored: int, slope: float, intercept: float, wc: float, ww: float) -> int:
    v = stored * slope + intercept
    t = (v - (wc - ww / 2.0)) / ww
    t = min(1.0, max(0.0, t))
    return int(math.floor(255.0 * t + 0.5))


def golden_pgm(rows: int, cols: int, wc: float, ww: float) -> bytes:
    body = bytes(
        window_byte((r * cols + c) % 4096, 1.0, 0.0, wc, ww)
        for r in range(rows) for c in range(cols))
    return b"P5\n%d %d\n255\n" % (cols, rows) + body


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    index = {"fixtures": [], "errors": []}
    for name, ts, body in fixtures():
        data = write_part10(body, ts)
        (OUT / f"{name}.dcm").write_bytes(data)
        (OUT / f"{name}.dump.txt").write_text(expected_dump(body, ts))
        index["fixtures"].append({"name": name, "transfer_syntax": ts})

    jpeg = write_part10(ct_identity()[:4], TS_JPEG_LOSSLESS)
    (OUT / "err_jpeg_ts.dcm").write_bytes(jpeg)
    index["errors"].append({"name": "err_jpeg_ts",
                            "error": "UnsupportedTransferSyntax",
                            "detail": TS_JPEG_LOSSLESS})

    whole = write_part10(ct_identity(), TS_EXPLICIT)
    (OUT / "err_truncated.dcm").write_bytes(whole[:-9])
    index["errors"].append({"name": "err_truncated", "error": "Truncated",
                            "detail": ""})

    (OUT / "preview_gradient_wc40_ww400.pgm").write_bytes(golden_pgm(32, 32, 40.0, 400.0))
    (OUT / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    print(f"wrote {len(index['fixtures'])} fixtures + {len(index['errors'])} error cases")


if __name__ == "__main__":
    main()
