"""DICOM Part-10 parsing, canonical serialization, and preview rendering."""

from .codec import (
    IMPLEMENTATION_CLASS_UID,
    NotDicom,
    SerializeOverflow,
    Truncated,
    UnsupportedTransferSyntax,
    dump,
    parse,
    serialize,
)
from .dataset import (
    Dataset,
    DicomError,
    DicomFile,
    Element,
    MalformedValue,
    decode_value,
    get_value,
)
from .preview import (
    BadWindow,
    PixelDescriptor,
    UnsupportedPixels,
    pixel_descriptor,
    render_preview,
    stored_pixels,
    to_pgm,
    to_png,
)
from .tags import (
    CT_IMAGE_STORAGE,
    DICTIONARY,
    EXPLICIT_VR_LE,
    IMPLICIT_VR_LE,
    Tag,
    keyword_of,
    keyword_to_tag,
    tag,
)

__all__ = [
    "CT_IMAGE_STORAGE", "DICTIONARY", "Dataset", "DicomError", "DicomFile",
    "Element", "EXPLICIT_VR_LE", "IMPLEMENTATION_CLASS_UID", "IMPLICIT_VR_LE",
    "BadWindow", "MalformedValue", "NotDicom", "PixelDescriptor",
    "SerializeOverflow", "Tag", "Truncated", "UnsupportedPixels",
    "UnsupportedTransferSyntax", "decode_value", "dump", "get_value",
    "keyword_of", "keyword_to_tag", "parse", "pixel_descriptor",
    "render_preview", "serialize", "stored_pixels", "tag", "to_pgm", "to_png",
]
