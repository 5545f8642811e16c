import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtryon.errors import InvalidArgumentError, InvalidLabelError, ParseError
from vtryon.preprocessing import (AGNOSTIC_FILL, OUTER_OPEN_WITHOUT_OUTER, SLEEVELESS_ROLLED,
                                  GarmentAnnotation, SleeveLength, YesNo, binarize,
                                  build_garment_mask, dilate_mask, make_agnostic,
                                  parse_annotation, refine_mask, validate_annotation)


def test_garment_mask_empty_selection():
    seg = np.zeros((16, 8), dtype=int)
    assert not build_garment_mask(seg, {5}).any()


def test_garment_mask_block():
    seg = np.zeros((16, 8), dtype=int)
    seg[4:8, 2:6] = 5
    m = build_garment_mask(seg, {5})
    expected = np.zeros((16, 8), np.uint8)
    expected[4:8, 2:6] = 255
    np.testing.assert_array_equal(m, expected)


def test_garment_mask_union_matches_pixel_oracle(rng):
    seg = rng.integers(0, 28, size=(20, 12))
    m = build_garment_mask(seg, {5, 6})
    for (r, c), lab in np.ndenumerate(seg):
        assert m[r, c] == (255 if lab in (5, 6) else 0)


@pytest.mark.parametrize("labels", [{28}, {-1}, {3, 40}])
def test_garment_mask_rejects_bad_labels(labels):
    with pytest.raises(InvalidLabelError):
        build_garment_mask(np.zeros((4, 4), int), labels)


def test_dilate_single_pixel():
    m = np.zeros((11, 11), np.uint8)
    m[5, 5] = 255
    out = dilate_mask(m, 3)
    expected = np.zeros_like(m)
    expected[4:7, 4:7] = 255
    np.testing.assert_array_equal(out, expected)


def test_dilate_fixed_points():
    z = np.zeros((6, 5), np.uint8)
    f = np.full((6, 5), 255, np.uint8)
    np.testing.assert_array_equal(dilate_mask(z), z)
    np.testing.assert_array_equal(dilate_mask(f), f)


def test_dilate_corner_is_clamped():
    m = np.zeros((5, 5), np.uint8)
    m[0, 0] = 255
    out = dilate_mask(m, 3)
    assert out.sum() == 4 * 255


@pytest.mark.parametrize("k", [0, 2, 4, -3])
def test_dilate_rejects_bad_kernel(k):
    with pytest.raises(InvalidArgumentError):
        dilate_mask(np.zeros((4, 4), np.uint8), k)


def _chebyshev_grow(mask, r):
    on = np.argwhere(mask == 255)
    out = np.zeros_like(mask)
    H, W = mask.shape
    for y in range(H):
        for x in range(W):
            if len(on) and (np.maximum(abs(on[:, 0] - y), abs(on[:, 1] - x)) <= r).any():
                out[y, x] = 255
    return out


binary_masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                      elements=st.sampled_from([0, 255]))


@settings(max_examples=60, deadline=None)
@given(binary_masks, st.sampled_from([1, 3, 5]))
def test_dilate_matches_chebyshev_oracle(mask, k):
    out = dilate_mask(mask, k)
    np.testing.assert_array_equal(out, _chebyshev_grow(mask, k // 2))
    assert ((out == 255) | (mask != 255)).all()   # never clears a pixel


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize(np.array([[127, 128, 255, 0]])), [[0, 255, 255, 0]])


def test_binarize_rejects_out_of_range():
    with pytest.raises(InvalidArgumentError):
        binarize(np.array([[256.0]]))
    with pytest.raises(InvalidArgumentError):
        binarize(np.array([[-1.0]]))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (7, 5), elements=st.floats(0, 255)))
def test_binarize_is_binary_and_idempotent(m):
    b = binarize(m)
    assert set(np.unique(b)) <= {0, 255}
    np.testing.assert_array_equal(binarize(b), b)


def test_agnostic_empty_and_full(rng):
    person = rng.uniform(-1, 1, (8, 6, 3))
    out = make_agnostic(person, np.zeros((8, 6), np.uint8))
    np.testing.assert_array_equal(out.pixels, person)
    out = make_agnostic(person, np.full((8, 6), 255, np.uint8))
    assert (out.pixels == AGNOSTIC_FILL).all()


def test_agnostic_half_mask_pixelwise(rng):
    person = rng.uniform(-1, 1, (8, 6, 3)).astype(np.float32)
    mask = np.zeros((8, 6), np.uint8)
    mask[:4] = 255
    out = make_agnostic(person, mask).pixels
    for r in range(8):
        for c in range(6):
            expect = np.zeros(3) if r < 4 else person[r, c]
            np.testing.assert_array_equal(out[r, c], expect)


def test_agnostic_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        make_agnostic(np.zeros((4, 4, 3)), np.zeros((4, 5), np.uint8))


@settings(max_examples=40, deadline=None)
@given(binary_masks)
def test_agnostic_preserves_unmasked_bits(mask):
    person = np.random.default_rng(1).uniform(-1, 1, mask.shape + (3,))
    out = make_agnostic(person, mask).pixels
    keep = mask != 255
    assert np.array_equal(out[keep], person[keep])


def test_refine_pipeline_binary():
    seg = np.zeros((10, 10), int)
    seg[3:5, 3:5] = 7
    m = refine_mask(seg, {7})
    assert set(np.unique(m)) == {0, 255}
    assert (m == 255).sum() == 16


# --- annotations ---

def test_sleeveless_rolled_violation():
    ann = GarmentAnnotation(sleeve_length=SleeveLength.SLEEVELESS, sleeves_rolled_up=YesNo.YES)
    assert validate_annotation(ann) == [SLEEVELESS_ROLLED]


def test_consistent_record():
    ann = GarmentAnnotation(sleeve_length=SleeveLength.LONG, sleeves_rolled_up=YesNo.YES)
    assert validate_annotation(ann) == []


def test_outer_open_without_outer():
    ann = GarmentAnnotation(wearing_outer_top=YesNo.NO, outer_top_open=YesNo.YES)
    assert validate_annotation(ann) == [OUTER_OPEN_WITHOUT_OUTER]


def test_all_unknown_is_valid():
    assert validate_annotation(GarmentAnnotation()) == []


def test_parse_template_lines():
    text = """- **Sleeve Length of the Upper Cloth**: short
- **Sleeves Rolled Up**: YES
- **Top Tucked In**: No
- **Wearing Outer Top**: no
- **Outer Top Open**: unknown
- **Fit**: Loose
- **Image Path**: images/p1.jpg"""
    ann = parse_annotation(text)
    assert ann.sleeve_length is SleeveLength.SHORT
    assert ann.sleeves_rolled_up is YesNo.YES
    assert ann.top_tucked_in is YesNo.NO
    assert ann.wearing_outer_top is YesNo.NO
    assert ann.outer_top_open is YesNo.UNKNOWN
    assert ann.fit == "loose"
    assert ann.image_path == "images/p1.jpg"


def test_parse_empty_record():
    assert parse_annotation("") == GarmentAnnotation()
    assert parse_annotation({}) == GarmentAnnotation()


def test_parse_unrecognised_option_maps_to_unknown():
    ann = parse_annotation({"Sleeve Length of the Upper Cloth": "three-quarter",
                            "sleeves_rolled_up": "maybe"})
    assert ann.sleeve_length is SleeveLength.UNKNOWN
    assert ann.sleeves_rolled_up is YesNo.UNKNOWN


@pytest.mark.parametrize("bad", ["{not json", "[1, 2]", "sleeve length short", '{"Fit": [1]}'])
def test_parse_malformed(bad):
    with pytest.raises(ParseError):
        parse_annotation(bad)


def test_json_round_trip():
    ann = GarmentAnnotation(SleeveLength.LONG, YesNo.YES, YesNo.NO, YesNo.YES, YesNo.YES,
                            "tight", "persons/1.png")
    record = json.loads(ann.to_json())
    assert set(record) == {"Sleeve Length of the Upper Cloth", "Sleeves Rolled Up", "Top Tucked In",
                           "Wearing Outer Top", "Outer Top Open", "Fit", "Image Path"}
    assert parse_annotation(ann.to_json()) == ann
