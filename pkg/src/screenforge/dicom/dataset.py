"""In-memory element and dataset model, plus typed value decoding."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Union

from ..errors import ScreenforgeError
from .tags import Tag

SUPPORTED_VRS = frozenset({
    "AE", "AS", "CS", "DA", "DS", "DT", "IS", "LO", "LT", "PN", "SH", "ST",
    "TM", "UI", "UL", "US", "SS", "SL", "FL", "FD", "OB", "OW", "SQ", "UN",
})
TEXT_VRS = frozenset({"AE", "AS", "CS", "DA", "DS", "DT", "IS", "LO", "LT",
                      "PN", "SH", "ST", "TM", "UI"})
# fixed-width binary VRs: (struct code, byte width)
BINARY_VRS = {"UL": ("<I", 4), "US": ("<H", 2), "SS": ("<h", 2), "SL": ("<i", 4),
              "FL": ("<f", 4), "FD": ("<d", 8)}
# VRs encoded with the 2-byte reserved field and 32-bit length in explicit form
LONG_VRS = frozenset({"OB", "OW", "SQ", "UN"})


class DicomError(ScreenforgeError):
    code = "DICOM"


class MalformedValue(DicomError):
    code = "DICOM_MALFORMED_VALUE"


@dataclass(frozen=True)
class Element:
    """One data element: value is raw bytes, or a tuple of item datasets for SQ."""

    tag: Tag
    vr: str
    value: Union[bytes, tuple["Dataset", ...]]

    def __post_init__(self):
        if self.vr not in SUPPORTED_VRS:
            raise ValueError(f"unsupported VR {self.vr!r} for {self.tag}")
        if self.vr == "SQ":
            if not isinstance(self.value, tuple):
                raise ValueError(f"{self.tag}: SQ value must be a tuple of datasets")
        elif not isinstance(self.value, bytes):
            raise ValueError(f"{self.tag}: value must be bytes for VR {self.vr}")

    @property
    def items(self) -> tuple["Dataset", ...]:
        if self.vr != "SQ":
            raise MalformedValue(f"{self.tag} has VR {self.vr}, not SQ")
        return self.value  # type: ignore[return-value]


class Dataset:
    """Tag-ordered element map; iteration is always ascending by tag."""

    def __init__(self, elements: "list[Element] | None" = None):
        self._elements: dict[Tag, Element] = {}
        self._sorted = True
        for el in elements or []:
            self.put(el)

    def put(self, element: Element) -> None:
        if element.tag not in self._elements:
            self._sorted = False
        self._elements[element.tag] = element

    def get(self, tag: Tag) -> Element | None:
        return self._elements.get(tag)

    def remove(self, tag: Tag) -> bool:
        return self._elements.pop(tag, None) is not None

    def __contains__(self, tag: Tag) -> bool:
        return tag in self._elements

    def __iter__(self) -> Iterator[Element]:
        if not self._sorted:
            self._elements = dict(sorted(self._elements.items()))
            self._sorted = True
        return iter(self._elements.values())

    def __len__(self) -> int:
        return len(self._elements)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return list(self) == list(other)

    def __repr__(self) -> str:
        return f"Dataset({len(self._elements)} elements)"


@dataclass(frozen=True)
class DicomFile:
    preamble: bytes
    file_meta: Dataset
    dataset: Dataset
    transfer_syntax: str

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DicomFile):
            return NotImplemented
        return self.dataset == other.dataset


def _strip_pad(vr: str, raw: bytes) -> str:
    text = raw.decode("ascii", errors="replace")
    if vr == "UI":
        return text.rstrip("\x00")
    return text.rstrip(" \x00")


def decode_value(element: Element):
    """Decode an element to a Python value per its VR.

    Text VRs give ``str`` with trailing padding stripped; fixed-width binary
    VRs give an int/float, or a tuple when multi-valued; IS/DS give int/float;
    OB/OW/UN give the raw bytes; SQ gives the item tuple.
    """
    vr, raw = element.vr, element.value
    if vr == "SQ":
        return element.items
    assert isinstance(raw, bytes)
    if vr in ("OB", "OW", "UN"):
        return raw
    if vr in BINARY_VRS:
        fmt, width = BINARY_VRS[vr]
        if len(raw) % width:
            raise MalformedValue(
                f"{element.tag}: {len(raw)} bytes is not a multiple of {width} for VR {vr}")
        values = [struct.unpack_from(fmt, raw, i)[0] for i in range(0, len(raw), width)]
        return values[0] if len(values) == 1 else tuple(values)
    text = _strip_pad(vr, raw)
    if vr == "IS":
        return _decode_multi(element, text, int)
    if vr == "DS":
        return _decode_multi(element, text, float)
    return text


def _decode_multi(element: Element, text: str, cast):
    if text == "":
        return None
    try:
        parts = [cast(p) for p in text.split("\\")]
    except ValueError:
        raise MalformedValue(
            f"{element.tag}: {text!r} is not a valid {element.vr} value") from None
    return parts[0] if len(parts) == 1 else tuple(parts)


def get_value(container: "DicomFile | Dataset", tag: Tag):
    """Decoded value of ``tag`` in the main dataset, or None when absent."""
    ds = container.dataset if isinstance(container, DicomFile) else container
    el = ds.get(tag)
    return None if el is None else decode_value(el)
