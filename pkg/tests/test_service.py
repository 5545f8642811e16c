import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from vtryon.harness.synthetic import gen_synthetic, to_uint8
from vtryon.preprocessing import make_agnostic, refine_mask
from vtryon.service import create_app
from vtryon.service.schemas import b64_to_array, png_to_b64


@pytest.fixture(scope="module")
def sample():
    return gen_synthetic(1, seed=3)[0]


@pytest.fixture(scope="module")
def client(tiny_system):
    return TestClient(create_app(system=tiny_system))


@pytest.fixture(scope="module")
def bare_client():
    return TestClient(create_app())


def _png(img):
    return png_to_b64(to_uint8(img))


def test_health(client, bare_client):
    assert client.get("/health").json()["model_loaded"] is True
    body = bare_client.get("/health").json()
    assert body["status"] == "ok" and body["model_loaded"] is False


def test_png_roundtrip():
    arr = np.arange(64 * 32 * 3, dtype=np.uint8).reshape(64, 32, 3)
    assert np.array_equal(b64_to_array(png_to_b64(arr)), arr)


def test_preprocess_matches_library(client, sample):
    body = {"person_png": _png(sample.person), "seg_png": png_to_b64(sample.seg.astype(np.uint8)),
            "labels": [7, 8, 9], "kernel": 3}
    res = client.post("/preprocess", json=body)
    assert res.status_code == 200
    mask = refine_mask(sample.seg, [7, 8, 9], 3)
    assert np.array_equal(b64_to_array(res.json()["mask_png"]), mask)
    person = b64_to_array(body["person_png"]).astype(np.float32) / 127.5 - 1
    expect = to_uint8(make_agnostic(person, mask).pixels)
    assert np.array_equal(b64_to_array(res.json()["agnostic_png"]), expect)


def test_preprocess_rejects_rgb_seg(client, sample):
    body = {"person_png": _png(sample.person), "seg_png": _png(sample.person), "labels": [7]}
    res = client.post("/preprocess", json=body)
    assert res.status_code == 422


def test_preprocess_rejects_bad_label(client, sample):
    seg = sample.seg.astype(np.uint8).copy()
    seg[0, 0] = 40
    body = {"person_png": _png(sample.person), "seg_png": png_to_b64(seg), "labels": [7]}
    assert client.post("/preprocess", json=body).status_code == 422


def test_preprocess_rejects_garbage_payload(client):
    body = {"person_png": "not base64!", "seg_png": "xx", "labels": [7]}
    assert client.post("/preprocess", json=body).status_code == 422


def test_parse_reports_violations(client):
    record = {"Sleeve Length of the Upper Cloth": "sleeveless", "Sleeves Rolled Up": "yes"}
    res = client.post("/annotations/parse", json={"record": json.dumps(record)})
    assert res.status_code == 200
    body = res.json()
    assert body["annotation"]["sleeve_length"] == "sleeveless"
    assert len(body["violations"]) == 1


def test_parse_accepts_mapping(client):
    res = client.post("/annotations/parse", json={"record": {"fit": "loose"}})
    assert res.status_code == 200 and res.json()["violations"] == []


def test_parse_unrecognised_option_is_unknown(client):
    res = client.post("/annotations/parse", json={"record": {"Sleeves Rolled Up": "maybe"}})
    assert res.json()["annotation"]["sleeves_rolled_up"] == "unknown"


def test_parse_rejects_malformed_json(client):
    res = client.post("/annotations/parse", json={"record": "{not json"})
    assert res.status_code == 422 and res.json()["error"] == "ParseError"


def test_validate_endpoint(client):
    ok = client.post("/annotations/validate", json={"sleeve_length": "long", "sleeves_rolled_up": "yes"})
    assert ok.status_code == 200 and ok.json()["violations"] == []
    bad = client.post("/annotations/validate", json={"wearing_outer_top": "no", "outer_top_open": "yes"})
    assert bad.json()["violations"]


def _tryon_body(sample, **kw):
    body = {"agnostic_png": _png(sample.agnostic), "pose_png": _png(sample.pose),
            "garments": {k: None if v is None else _png(v) for k, v in sample.garments.items()},
            "prompt": "", "seed": 0, "guidance": 2.0, "steps": 2}
    body.update(kw)
    return body


def test_tryon_returns_image(client, sample):
    res = client.post("/tryon", json=_tryon_body(sample))
    assert res.status_code == 200
    img = b64_to_array(res.json()["image_png"])
    assert img.shape == (64, 32, 3)


def test_tryon_deterministic_in_seed(client, sample):
    a = client.post("/tryon", json=_tryon_body(sample, seed=5)).json()["image_png"]
    b = client.post("/tryon", json=_tryon_body(sample, seed=5)).json()["image_png"]
    assert a == b


def test_tryon_without_model_is_503(bare_client, sample):
    assert bare_client.post("/tryon", json=_tryon_body(sample)).status_code == 503


@pytest.mark.parametrize("field,value", [("guidance", -1.0), ("steps", 0)])
def test_tryon_validates_fields(client, sample, field, value):
    assert client.post("/tryon", json=_tryon_body(sample, **{field: value})).status_code == 422


def test_tryon_rejects_grey_agnostic(client, sample):
    body = _tryon_body(sample, agnostic_png=png_to_b64(sample.seg.astype(np.uint8)))
    assert client.post("/tryon", json=body).status_code == 422


def test_evaluate_identical_sets(client):
    imgs = {f"{s.id}.png": _png(s.person) for s in gen_synthetic(4, seed=1)}
    res = client.post("/evaluate", json={"generated": imgs, "reference": imgs})
    assert res.status_code == 200
    body = res.json()
    assert body["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert body["fid"] == pytest.approx(0.0, abs=1e-6)
    assert body["n_samples"] == 4


def test_evaluate_mismatched_names(client):
    imgs = {f"{s.id}.png": _png(s.person) for s in gen_synthetic(2, seed=1)}
    other = {"x" + k: v for k, v in imgs.items()}
    assert client.post("/evaluate", json={"generated": imgs, "reference": other}).status_code == 422
