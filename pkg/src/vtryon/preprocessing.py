"""Garment masks, agnostic person images and attribute annotations.

Masking follows three steps: select garment labels from a part segmentation,
dilate the selection, then threshold back to a hard {0, 255} mask.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidArgumentError, InvalidLabelError, ParseError, ShapeError

NUM_LABELS = 28
BINARY_THRESHOLD = 128
AGNOSTIC_FILL = 0.0


def _check_labels(labels: Iterable[int]) -> set[int]:
    out = set()
    for lab in labels:
        lab = int(lab)
        if not 0 <= lab < NUM_LABELS:
            raise InvalidLabelError(f"label id {lab} outside [0, {NUM_LABELS - 1}]")
        out.add(lab)
    return out


def build_garment_mask(seg: np.ndarray, garment_labels: Iterable[int]) -> np.ndarray:
    """Return a uint8 mask that is 255 where ``seg`` holds one of ``garment_labels``."""
    labels = _check_labels(garment_labels)
    seg = np.asarray(seg)
    if seg.ndim != 2:
        raise ShapeError(f"segmentation must be 2-D, got shape {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= NUM_LABELS):
        raise InvalidLabelError("segmentation map contains labels outside [0, 27]")
    hit = np.isin(seg, sorted(labels)) if labels else np.zeros(seg.shape, dtype=bool)
    return np.where(hit, 255, 0).astype(np.uint8)


def dilate_mask(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Square-kernel binary dilation; the neighbourhood is clamped at the image border."""
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidArgumentError(f"kernel must be a positive odd integer, got {kernel}")
    on = np.asarray(mask) == 255
    r = kernel // 2
    if r == 0:
        return np.where(on, 255, 0).astype(np.uint8)
    h, w = on.shape
    # Max filter as a shifted OR; padding with False is the same as clamping.
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    padded[r:r + h, r:r + w] = on
    out = np.zeros_like(on)
    for dy in range(kernel):
        for dx in range(kernel):
            out |= padded[dy:dy + h, dx:dx + w]
    return np.where(out, 255, 0).astype(np.uint8)


def binarize(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.size and (np.isnan(m).any() or m.min() < 0 or m.max() > 255):
        raise InvalidArgumentError("mask values must lie in [0, 255]")
    return np.where(m >= BINARY_THRESHOLD, 255, 0).astype(np.uint8)


def refine_mask(seg: np.ndarray, garment_labels: Iterable[int], kernel: int = 3) -> np.ndarray:
    """Full masking pipeline: select, dilate, threshold."""
    return binarize(dilate_mask(build_garment_mask(seg, garment_labels), kernel))


@dataclass
class AgnosticImage:
    pixels: np.ndarray
    mask: np.ndarray


def make_agnostic(person: np.ndarray, mask: np.ndarray) -> AgnosticImage:
    person = np.asarray(person)
    mask = np.asarray(mask)
    if person.ndim != 3 or person.shape[2] != 3 or person.shape[:2] != mask.shape:
        raise InvalidArgumentError(
            f"person {person.shape} and mask {mask.shape} do not match")
    pixels = person.copy()
    pixels[mask == 255] = AGNOSTIC_FILL
    return AgnosticImage(pixels=pixels, mask=mask)


# --- annotations -------------------------------------------------------------

class SleeveLength(str, Enum):
    SHORT = "short"
    LONG = "long"
    SLEEVELESS = "sleeveless"
    UNKNOWN = "unknown"


class YesNo(str, Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"


# Field order and display names follow the attribute prompt template.
TEMPLATE_FIELDS = {
    "sleeve_length": "Sleeve Length of the Upper Cloth",
    "sleeves_rolled_up": "Sleeves Rolled Up",
    "top_tucked_in": "Top Tucked In",
    "wearing_outer_top": "Wearing Outer Top",
    "outer_top_open": "Outer Top Open",
    "fit": "Fit",
    "image_path": "Image Path",
}

_FIELD_PATTERNS = [
    ("sleeve_length", re.compile(r"sleeve\s*length")),
    ("sleeves_rolled_up", re.compile(r"roll")),
    ("top_tucked_in", re.compile(r"tuck")),
    ("outer_top_open", re.compile(r"outer.*open|open")),
    ("wearing_outer_top", re.compile(r"wearing|outer")),
    ("image_path", re.compile(r"image\s*path|path")),
    ("fit", re.compile(r"\bfit\b")),
]

SLEEVELESS_ROLLED = "SLEEVELESS_ROLLED"
OUTER_OPEN_WITHOUT_OUTER = "OUTER_OPEN_WITHOUT_OUTER"


@dataclass(frozen=True)
class GarmentAnnotation:
    sleeve_length: SleeveLength = SleeveLength.UNKNOWN
    sleeves_rolled_up: YesNo = YesNo.UNKNOWN
    top_tucked_in: YesNo = YesNo.UNKNOWN
    wearing_outer_top: YesNo = YesNo.UNKNOWN
    outer_top_open: YesNo = YesNo.UNKNOWN
    fit: str = "unknown"
    image_path: str = ""

    def to_record(self) -> dict[str, str]:
        return {
            TEMPLATE_FIELDS[name]: (v.value if isinstance(v, Enum) else v)
            for name, v in vars(self).items()
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True)


def validate_annotation(ann: GarmentAnnotation) -> list[str]:
    """Return the consistency rules violated by ``ann`` (empty when consistent)."""
    violations = []
    if ann.sleeve_length is SleeveLength.SLEEVELESS and ann.sleeves_rolled_up is YesNo.YES:
        violations.append(SLEEVELESS_ROLLED)
    if ann.wearing_outer_top is YesNo.NO and ann.outer_top_open is YesNo.YES:
        violations.append(OUTER_OPEN_WITHOUT_OUTER)
    return violations


def _canonical_field(key: str) -> str | None:
    k = key.strip().strip("-*_ ").lower().replace("_", " ")
    k = re.sub(r"\*+", "", k)
    for name, pat in _FIELD_PATTERNS:
        if pat.search(k):
            return name
    return None


def _clean_value(v: str) -> str:
    v = v.strip().strip("*").strip()
    v = re.sub(r"\(.*?\)", "", v).strip()
    return v.strip(" .\"'").lower()


def _enum_value(enum_cls, raw: str):
    try:
        return enum_cls(_clean_value(raw))
    except ValueError:
        return enum_cls.UNKNOWN


def parse_annotation(record: str | Mapping[str, object]) -> GarmentAnnotation:
    """Parse a template answer given as JSON text, ``key: value`` lines, or a mapping.

    Field names are matched loosely (``"Sleeve Length of the Upper Cloth"`` and
    ``"sleeve_length"`` both work). Option strings are case-insensitive and
    anything unrecognised becomes ``unknown``.
    """
    if isinstance(record, str):
        text = record.strip()
        if text.startswith("{"):
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON annotation: {exc}") from exc
        else:
            pairs = {}
            for line in text.splitlines():
                line = line.strip()
                if not line:
                    continue
                if ":" not in line:
                    raise ParseError(f"annotation line has no 'field: value' form: {line!r}")
                key, value = line.split(":", 1)
                pairs[key] = value
            record = pairs
    if not isinstance(record, Mapping):
        raise ParseError(f"annotation must be an object, got {type(record).__name__}")

    fields: dict[str, str] = {}
    for key, value in record.items():
        if not isinstance(key, str):
            raise ParseError(f"annotation key must be a string, got {key!r}")
        if value is None:
            continue
        if not isinstance(value, (str, int, float, bool)):
            raise ParseError(f"annotation value for {key!r} must be a scalar")
        name = _canonical_field(key)
        if name is not None and name not in fields:
            fields[name] = str(value)

    fit = _clean_value(fields.get("fit", "unknown")) or "unknown"
    return GarmentAnnotation(
        sleeve_length=_enum_value(SleeveLength, fields.get("sleeve_length", "unknown")),
        sleeves_rolled_up=_enum_value(YesNo, fields.get("sleeves_rolled_up", "unknown")),
        top_tucked_in=_enum_value(YesNo, fields.get("top_tucked_in", "unknown")),
        wearing_outer_top=_enum_value(YesNo, fields.get("wearing_outer_top", "unknown")),
        outer_top_open=_enum_value(YesNo, fields.get("outer_top_open", "unknown")),
        fit=fit,
        image_path=fields.get("image_path", "").strip(),
    )
