"""Tag value type and the data dictionary of tags this platform handles.

The dictionary is intentionally small: file-meta plumbing, patient and study
identity, acquisition context, and the image-pixel module. Anything outside
it still parses (value bytes preserved, VR ``UN`` under implicit encoding),
it just has no keyword.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import total_ordering


@total_ordering
@dataclass(frozen=True)
class Tag:
    group: int
    element: int

    def __post_init__(self):
        if not (0 <= self.group <= 0xFFFF and 0 <= self.element <= 0xFFFF):
            raise ValueError(f"tag out of range: ({self.group:#x},{self.element:#x})")

    @property
    def is_private(self) -> bool:
        return self.group % 2 == 1

    def __lt__(self, other: "Tag") -> bool:
        return (self.group, self.element) < (other.group, other.element)

    def __str__(self) -> str:
        return f"({self.group:04x},{self.element:04x})"


def tag(group: int, element: int) -> Tag:
    return Tag(group, element)


# tag -> (vr, keyword)
DICTIONARY: dict[Tag, tuple[str, str]] = {
    Tag(0x0002, 0x0000): ("UL", "FileMetaInformationGroupLength"),
    Tag(0x0002, 0x0001): ("OB", "FileMetaInformationVersion"),
    Tag(0x0002, 0x0002): ("UI", "MediaStorageSOPClassUID"),
    Tag(0x0002, 0x0003): ("UI", "MediaStorageSOPInstanceUID"),
    Tag(0x0002, 0x0010): ("UI", "TransferSyntaxUID"),
    Tag(0x0002, 0x0012): ("UI", "ImplementationClassUID"),
    Tag(0x0002, 0x0013): ("SH", "ImplementationVersionName"),
    Tag(0x0008, 0x0005): ("CS", "SpecificCharacterSet"),
    Tag(0x0008, 0x0008): ("CS", "ImageType"),
    Tag(0x0008, 0x0016): ("UI", "SOPClassUID"),
    Tag(0x0008, 0x0018): ("UI", "SOPInstanceUID"),
    Tag(0x0008, 0x0020): ("DA", "StudyDate"),
    Tag(0x0008, 0x0021): ("DA", "SeriesDate"),
    Tag(0x0008, 0x0022): ("DA", "AcquisitionDate"),
    Tag(0x0008, 0x0023): ("DA", "ContentDate"),
    Tag(0x0008, 0x0030): ("TM", "StudyTime"),
    Tag(0x0008, 0x0050): ("SH", "AccessionNumber"),
    Tag(0x0008, 0x0060): ("CS", "Modality"),
    Tag(0x0008, 0x0070): ("LO", "Manufacturer"),
    Tag(0x0008, 0x0080): ("LO", "InstitutionName"),
    Tag(0x0008, 0x0090): ("PN", "ReferringPhysicianName"),
    Tag(0x0008, 0x1030): ("LO", "StudyDescription"),
    Tag(0x0008, 0x103E): ("LO", "SeriesDescription"),
    Tag(0x0008, 0x1048): ("PN", "PhysiciansOfRecord"),
    Tag(0x0008, 0x1140): ("SQ", "ReferencedImageSequence"),
    Tag(0x0010, 0x0010): ("PN", "PatientName"),
    Tag(0x0010, 0x0020): ("LO", "PatientID"),
    Tag(0x0010, 0x0030): ("DA", "PatientBirthDate"),
    Tag(0x0010, 0x0040): ("CS", "PatientSex"),
    Tag(0x0010, 0x1000): ("LO", "OtherPatientIDs"),
    Tag(0x0010, 0x1010): ("AS", "PatientAge"),
    Tag(0x0010, 0x2154): ("SH", "PatientTelephoneNumbers"),
    Tag(0x0010, 0x21B0): ("LT", "AdditionalPatientHistory"),
    Tag(0x0012, 0x0062): ("CS", "PatientIdentityRemoved"),
    Tag(0x0012, 0x0063): ("LO", "DeidentificationMethod"),
    Tag(0x0018, 0x0050): ("DS", "SliceThickness"),
    Tag(0x0018, 0x0060): ("DS", "KVP"),
    Tag(0x0018, 0x5100): ("CS", "PatientPosition"),
    Tag(0x0020, 0x000D): ("UI", "StudyInstanceUID"),
    Tag(0x0020, 0x000E): ("UI", "SeriesInstanceUID"),
    Tag(0x0020, 0x0010): ("SH", "StudyID"),
    Tag(0x0020, 0x0011): ("IS", "SeriesNumber"),
    Tag(0x0020, 0x0013): ("IS", "InstanceNumber"),
    Tag(0x0020, 0x0032): ("DS", "ImagePositionPatient"),
    Tag(0x0020, 0x0037): ("DS", "ImageOrientationPatient"),
    Tag(0x0020, 0x0052): ("UI", "FrameOfReferenceUID"),
    Tag(0x0028, 0x0002): ("US", "SamplesPerPixel"),
    Tag(0x0028, 0x0004): ("CS", "PhotometricInterpretation"),
    Tag(0x0028, 0x0008): ("IS", "NumberOfFrames"),
    Tag(0x0028, 0x0010): ("US", "Rows"),
    Tag(0x0028, 0x0011): ("US", "Columns"),
    Tag(0x0028, 0x0030): ("DS", "PixelSpacing"),
    Tag(0x0028, 0x0100): ("US", "BitsAllocated"),
    Tag(0x0028, 0x0101): ("US", "BitsStored"),
    Tag(0x0028, 0x0102): ("US", "HighBit"),
    Tag(0x0028, 0x0103): ("US", "PixelRepresentation"),
    Tag(0x0028, 0x1050): ("DS", "WindowCenter"),
    Tag(0x0028, 0x1051): ("DS", "WindowWidth"),
    Tag(0x0028, 0x1052): ("DS", "RescaleIntercept"),
    Tag(0x0028, 0x1053): ("DS", "RescaleSlope"),
    Tag(0x7FE0, 0x0010): ("OW", "PixelData"),
}

KEYWORDS: dict[str, Tag] = {kw: t for t, (_, kw) in DICTIONARY.items()}


def keyword_to_tag(keyword: str) -> Tag:
    try:
        return KEYWORDS[keyword]
    except KeyError:
        raise KeyError(f"unknown tag keyword: {keyword}") from None


def dictionary_vr(t: Tag) -> str:
    """VR a tag takes under implicit encoding; UN when the tag is unknown."""
    entry = DICTIONARY.get(t)
    return entry[0] if entry else "UN"


def keyword_of(t: Tag) -> str | None:
    entry = DICTIONARY.get(t)
    return entry[1] if entry else None


# transfer syntaxes and SOP classes this platform knows by name
IMPLICIT_VR_LE = "1.2.840.10008.1.2"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
CT_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.2"
