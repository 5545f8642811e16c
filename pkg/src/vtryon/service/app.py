"""FastAPI application exposing preprocessing, annotation checks, try-on and evaluation."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import SamplerConfig
from ..errors import InvalidArgumentError, ParseError, ShapeError
from ..grm import GarmentSet
from ..harness.metrics import image_set_report
from ..harness.synthetic import to_uint8, to_unit
from ..pipeline import TryOnSystem
from ..preprocessing import (GarmentAnnotation, make_agnostic, parse_annotation, refine_mask,
                             validate_annotation)
from . import schemas as S

log = logging.getLogger(__name__)


def _rgb(data: str) -> np.ndarray:
    arr = S.b64_to_array(data)
    if arr.ndim != 3:
        raise InvalidArgumentError("expected an RGB image")
    return to_unit(arr)


def _annotation_body(ann: GarmentAnnotation) -> S.AnnotationBody:
    return S.AnnotationBody(**{k: getattr(v, "value", v) for k, v in vars(ann).items()})


def create_app(model_dir: str | Path | None = None, system: TryOnSystem | None = None) -> FastAPI:
    """Build the app. The try-on endpoint needs ``model_dir`` (or a ready ``system``)."""
    app = FastAPI(title="vtryon", version=__version__)
    app.state.system = system
    if system is None and model_dir is not None:
        app.state.system = TryOnSystem.load(model_dir)

    @app.exception_handler(InvalidArgumentError)
    @app.exception_handler(ShapeError)
    @app.exception_handler(ParseError)
    async def _bad_input(request: Request, exc: Exception):
        return JSONResponse(status_code=422, content={"detail": str(exc), "error": type(exc).__name__})

    @app.get("/health", response_model=S.Health)
    def health():
        return S.Health(version=__version__, model_loaded=app.state.system is not None)

    @app.post("/preprocess", response_model=S.PreprocessResponse)
    def preprocess(req: S.PreprocessRequest):
        person = _rgb(req.person_png)
        seg = S.b64_to_array(req.seg_png)
        if seg.ndim != 2:
            raise InvalidArgumentError("segmentation map must be single-channel")
        mask = refine_mask(seg, req.labels, req.kernel)
        agn = make_agnostic(person, mask)
        return S.PreprocessResponse(mask_png=S.png_to_b64(mask), agnostic_png=S.png_to_b64(to_uint8(agn.pixels)))

    @app.post("/annotations/parse", response_model=S.AnnotationResult)
    def parse(req: S.ParseRequest):
        ann = parse_annotation(req.record)
        return S.AnnotationResult(annotation=_annotation_body(ann), violations=validate_annotation(ann))

    @app.post("/annotations/validate", response_model=S.AnnotationResult)
    def validate(body: S.AnnotationBody):
        ann = parse_annotation(body.model_dump())
        return S.AnnotationResult(annotation=_annotation_body(ann), violations=validate_annotation(ann))

    @app.post("/tryon", response_model=S.TryOnResponse)
    def tryon(req: S.TryOnRequest):
        sys_ = app.state.system
        if sys_ is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        garments = GarmentSet(**{k: (None if v is None else _rgb(v))
                                 for k, v in req.garments.model_dump().items()})
        scfg = SamplerConfig(num_steps=req.steps, guidance_scale=req.guidance, seed=req.seed)
        out = sys_.tryon([_rgb(req.agnostic_png)], [_rgb(req.pose_png)], [garments], [req.prompt], scfg)[0]
        return S.TryOnResponse(image_png=S.png_to_b64(to_uint8(out)))

    @app.post("/evaluate", response_model=S.MetricReportBody)
    def evaluate(req: S.EvaluateRequest):
        if not req.generated or set(req.generated) != set(req.reference):
            raise InvalidArgumentError("generated and reference images must pair up by name")
        names = sorted(req.generated)
        gen = [_rgb(req.generated[n]) for n in names]
        ref = [_rgb(req.reference[n]) for n in names]
        if any(a.shape != b.shape for a, b in zip(gen, ref)):
            raise ShapeError("generated and reference images differ in size")
        return S.MetricReportBody(**image_set_report(gen, ref, seed=req.seed).to_dict())

    return app
