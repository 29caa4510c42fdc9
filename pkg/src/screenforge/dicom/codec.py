"""Part-10 stream parser, canonical serializer, and element dump.

Only the two uncompressed little-endian transfer syntaxes are accepted.
Serialization always produces canonical form: explicit VR little endian,
ascending tag order, even-padded values, defined sequence lengths, and a
regenerated file-meta group, so serializing the same dataset twice is
byte-identical.
"""

from __future__ import annotations

import struct
from io import BytesIO

from .dataset import (
    BINARY_VRS,
    Dataset,
    DicomError,
    DicomFile,
    Element,
    LONG_VRS,
    SUPPORTED_VRS,
    TEXT_VRS,
)
from .tags import (
    DICTIONARY,
    EXPLICIT_VR_LE,
    IMPLICIT_VR_LE,
    Tag,
    dictionary_vr,
)

PREAMBLE = bytes(128)
MAGIC = b"DICM"
IMPLEMENTATION_CLASS_UID = "2.25.310758942614391275843160193573419"
IMPLEMENTATION_VERSION = "SCREENFORGE-01"

_ITEM = Tag(0xFFFE, 0xE000)
_ITEM_DELIM = Tag(0xFFFE, 0xE00D)
_SEQ_DELIM = Tag(0xFFFE, 0xE0DD)
_UNDEFINED = 0xFFFFFFFF

# explicit-VR codes outside the supported set that still use the long form;
# values parse fine, the element is just carried as UN
_FOREIGN_LONG_VRS = frozenset({"UT", "UC", "UR", "OD", "OF", "OL", "OV", "SV", "UV"})


class NotDicom(DicomError):
    code = "NOT_DICOM"


class UnsupportedTransferSyntax(DicomError):
    code = "UNSUPPORTED_TRANSFER_SYNTAX"

    def __init__(self, uid: str):
        super().__init__(f"unsupported transfer syntax: {uid}", uid=uid)
        self.uid = uid


class Truncated(DicomError):
    code = "DICOM_TRUNCATED"


class SerializeOverflow(DicomError):
    code = "DICOM_SERIALIZE_OVERFLOW"


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int, context: str) -> bytes:
        if self.remaining() < n:
            raise Truncated(f"{context}: needed {n} bytes, {self.remaining()} left")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self, context: str) -> int:
        return struct.unpack("<H", self.take(2, context))[0]

    def u32(self, context: str) -> int:
        return struct.unpack("<I", self.take(4, context))[0]

    def tag(self, context: str) -> Tag:
        group = self.u16(context)
        element = self.u16(context)
        return Tag(group, element)


def _read_element(r: _Reader, explicit: bool) -> Element:
    tag = r.tag("element header")
    ctx = str(tag)
    if explicit:
        vr = r.take(2, ctx).decode("ascii", errors="replace")
        if vr in LONG_VRS or vr in _FOREIGN_LONG_VRS:
            r.take(2, ctx)  # reserved
            length = r.u32(ctx)
        else:
            length = r.u16(ctx)
        if vr not in SUPPORTED_VRS:
            vr = "UN"
    else:
        length = r.u32(ctx)
        vr = "SQ" if length == _UNDEFINED else dictionary_vr(tag)
    if vr == "SQ":
        items = _read_sequence(r, explicit, length, ctx)
        return Element(tag, "SQ", items)
    if length == _UNDEFINED:
        raise Truncated(f"{ctx}: undefined length is only supported for sequences")
    value = r.take(length, ctx)
    return Element(tag, vr, value)


def _read_sequence(r: _Reader, explicit: bool, length: int, ctx: str) -> tuple[Dataset, ...]:
    items: list[Dataset] = []
    end = None if length == _UNDEFINED else r.pos + length
    if end is not None and end > len(r.data):
        raise Truncated(f"{ctx}: sequence extends past end of input")
    while True:
        if end is not None and r.pos >= end:
            break
        item_tag = r.tag(f"{ctx} item header")
        item_len = r.u32(f"{ctx} item header")
        if item_tag == _SEQ_DELIM:
            break
        if item_tag != _ITEM:
            raise Truncated(f"{ctx}: expected an item tag, found {item_tag}")
        items.append(_read_item(r, explicit, item_len, ctx))
    return tuple(items)


def _read_item(r: _Reader, explicit: bool, length: int, ctx: str) -> Dataset:
    ds = Dataset()
    end = None if length == _UNDEFINED else r.pos + length
    if end is not None and end > len(r.data):
        raise Truncated(f"{ctx}: item extends past end of input")
    while True:
        if end is not None:
            if r.pos >= end:
                break
        else:
            mark = r.pos
            t = r.tag(f"{ctx} item")
            ln = r.u32(f"{ctx} item")
            if t == _ITEM_DELIM:
                break
            r.pos = mark
        ds.put(_read_element(r, explicit))
    return ds


def _parse_file_meta(r: _Reader) -> Dataset:
    meta = Dataset()
    if r.remaining() < 8:
        return meta
    first = _read_element(r, explicit=True)
    meta.put(first)
    if first.tag == Tag(0x0002, 0x0000):
        (meta_len,) = struct.unpack("<I", first.value)
        end = r.pos + meta_len
        if end > len(r.data):
            raise Truncated("file meta group length extends past end of input")
        while r.pos < end:
            meta.put(_read_element(r, explicit=True))
    else:
        while r.remaining() >= 8:
            mark = r.pos
            group = struct.unpack_from("<H", r.data, r.pos)[0]
            if group != 0x0002:
                r.pos = mark
                break
            meta.put(_read_element(r, explicit=True))
    return meta


def parse(data: bytes) -> DicomFile:
    """Parse a Part-10 stream. Every element's value bytes are preserved."""
    if len(data) < 132 or data[128:132] != MAGIC:
        raise NotDicom("no DICM magic at offset 128")
    r = _Reader(data, 132)
    meta = _parse_file_meta(r)
    ts_el = meta.get(Tag(0x0002, 0x0010))
    if ts_el is None:
        raise UnsupportedTransferSyntax("(absent)")
    ts = ts_el.value.decode("ascii", errors="replace").rstrip("\x00 ")
    if ts not in (IMPLICIT_VR_LE, EXPLICIT_VR_LE):
        raise UnsupportedTransferSyntax(ts)
    explicit = ts == EXPLICIT_VR_LE
    body = Dataset()
    while r.remaining() > 0:
        body.put(_read_element(r, explicit))
    return DicomFile(preamble=data[:128], file_meta=meta, dataset=body,
                     transfer_syntax=ts)


# -- canonical serialization ---------------------------------------------------

_PAD_NUL = frozenset({"UI", "OB", "OW", "UN"})


def _pad(vr: str, raw: bytes) -> bytes:
    if len(raw) % 2 == 0:
        return raw
    return raw + (b"\x00" if vr in _PAD_NUL else b" ")


def _write_element(out: BytesIO, el: Element) -> None:
    if el.vr == "SQ":
        body = BytesIO()
        for item in el.items:
            item_body = BytesIO()
            for child in item:
                _write_element(item_body, child)
            raw = item_body.getvalue()
            body.write(struct.pack("<HHI", 0xFFFE, 0xE000, len(raw)))
            body.write(raw)
        value = body.getvalue()
    else:
        value = _pad(el.vr, el.value)
    out.write(struct.pack("<HH", el.tag.group, el.tag.element))
    if el.vr in LONG_VRS:
        if len(value) > 0xFFFFFFFE:
            raise SerializeOverflow(f"{el.tag}: value too long for VR {el.vr}")
        out.write(el.vr.encode("ascii") + b"\x00\x00")
        out.write(struct.pack("<I", len(value)))
    else:
        if len(value) > 0xFFFE:
            raise SerializeOverflow(
                f"{el.tag}: {len(value)} bytes exceeds the 16-bit length of VR {el.vr}")
        out.write(el.vr.encode("ascii"))
        out.write(struct.pack("<H", len(value)))
    out.write(value)


def _text_element(tag: Tag, vr: str, text: str) -> Element:
    return Element(tag, vr, _pad(vr, text.encode("ascii")))


def _build_file_meta(f: DicomFile) -> Dataset:
    meta = Dataset()
    meta.put(Element(Tag(0x0002, 0x0001), "OB", b"\x00\x01"))
    for meta_tag, body_tag in ((Tag(0x0002, 0x0002), Tag(0x0008, 0x0016)),
                               (Tag(0x0002, 0x0003), Tag(0x0008, 0x0018))):
        el = f.dataset.get(body_tag) or f.file_meta.get(meta_tag)
        if el is not None:
            meta.put(Element(meta_tag, "UI", _pad("UI", el.value)))
    meta.put(_text_element(Tag(0x0002, 0x0010), "UI", EXPLICIT_VR_LE))
    meta.put(_text_element(Tag(0x0002, 0x0012), "UI", IMPLEMENTATION_CLASS_UID))
    meta.put(_text_element(Tag(0x0002, 0x0013), "SH", IMPLEMENTATION_VERSION))
    body = BytesIO()
    for el in meta:
        _write_element(body, el)
    group_length = Element(Tag(0x0002, 0x0000), "UL",
                           struct.pack("<I", len(body.getvalue())))
    full = Dataset([group_length])
    for el in meta:
        full.put(el)
    return full


def serialize(f: DicomFile) -> bytes:
    """Canonical bytes for a file: stable under parse/serialize round trips."""
    out = BytesIO()
    out.write(PREAMBLE)
    out.write(MAGIC)
    for el in _build_file_meta(f):
        _write_element(out, el)
    for el in f.dataset:
        _write_element(out, el)
    return out.getvalue()


# -- dump -----------------------------------------------------------------------

def dump(f: DicomFile) -> str:
    """Stable text dump of the parsed file, used for oracle comparison.

    Values up to 64 bytes appear as lowercase hex; longer ones as a SHA-256
    digest. Sequences recurse with four-space indentation.
    """
    import hashlib

    lines = [f"transfer_syntax={f.transfer_syntax}"]

    def emit(ds: Dataset, depth: int) -> None:
        pad = "    " * depth
        for el in ds:
            if el.vr == "SQ":
                lines.append(f"{pad}{el.tag} SQ items={len(el.items)}")
                for i, item in enumerate(el.items):
                    lines.append(f"{pad}  item {i}")
                    emit(item, depth + 1)
                continue
            raw = el.value
            if len(raw) <= 64:
                desc = f"hex={raw.hex()}"
            else:
                desc = f"sha256={hashlib.sha256(raw).hexdigest()}"
            lines.append(f"{pad}{el.tag} {el.vr} #{len(raw)} {desc}")

    emit(f.file_meta, 0)
    emit(f.dataset, 0)
    return "\n".join(lines) + "\n"
