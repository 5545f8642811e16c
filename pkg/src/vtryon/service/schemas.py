"""Request and response bodies. Images travel as base64-encoded PNG."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field

from ..errors import InvalidArgumentError


def png_to_b64(array: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def b64_to_array(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.array(im)
    except Exception as exc:  # bad base64 or not an image
        raise InvalidArgumentError(f"could not decode PNG payload: {exc}") from None


class Health(BaseModel):
    status: str = "ok"
    version: str
    model_loaded: bool


class PreprocessRequest(BaseModel):
    person_png: str
    seg_png: str = Field(description="single-channel label map")
    labels: list[int] = Field(min_length=1)
    kernel: int = 3


class PreprocessResponse(BaseModel):
    mask_png: str
    agnostic_png: str


class AnnotationBody(BaseModel):
    sleeve_length: str = "unknown"
    sleeves_rolled_up: str = "unknown"
    top_tucked_in: str = "unknown"
    wearing_outer_top: str = "unknown"
    outer_top_open: str = "unknown"
    fit: str = "unknown"
    image_path: str = ""


class ParseRequest(BaseModel):
    record: str | dict


class AnnotationResult(BaseModel):
    annotation: AnnotationBody
    violations: list[str]


class GarmentPayload(BaseModel):
    upper: str | None = None
    lower: str | None = None
    full: str | None = None


class TryOnRequest(BaseModel):
    agnostic_png: str
    pose_png: str
    garments: GarmentPayload
    prompt: str = ""
    seed: int = 0
    guidance: float = Field(2.0, ge=0)
    steps: int = Field(50, ge=1, le=1000)


class TryOnResponse(BaseModel):
    image_png: str


class EvaluateRequest(BaseModel):
    generated: dict[str, str] = Field(description="file name -> PNG")
    reference: dict[str, str]
    seed: int = 0


class MetricReportBody(BaseModel):
    ssim: float
    fid: float
    kid: float
    n_samples: int
    transfer_fidelity: float | None = None
    identity_preservation: float | None = None
