import filecmp
from collections import Counter

import numpy as np
import pytest

from vtryon.errors import InvalidArgumentError, ShapeError
from vtryon.harness.io import (load_image, load_png, read_dataset, read_garment_manifest, write_dataset)
from vtryon.harness.synthetic import (GARMENT_COLORS, GARMENT_LABELS, MARKER, gen_synthetic, to_uint8,
                                      to_unit)
from vtryon.preprocessing import make_agnostic, refine_mask, validate_annotation


@pytest.fixture(scope="module")
def samples():
    return gen_synthetic(200, seed=0)


def test_single_sample_deterministic():
    a, b = gen_synthetic(1, seed=5)[0], gen_synthetic(1, seed=5)[0]
    for f in ("person", "pose", "seg", "agnostic", "mask"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert a.annotation == b.annotation and a.prompt == b.prompt


def test_sample_depends_only_on_index():
    a = gen_synthetic(3, seed=1)[2]
    b = gen_synthetic(1, seed=1, start=2)[0]
    assert np.array_equal(a.person, b.person)


def test_annotations_valid(samples):
    assert all(validate_annotation(s.annotation) == [] for s in samples)


def test_strata_counts(samples):
    sleeves = Counter(s.annotation.sleeve_length.value for s in samples)
    assert set(sleeves) == {"sleeveless", "short", "long"}
    assert min(sleeves.values()) >= 10
    combos = Counter((s.annotation.sleeves_rolled_up.value, s.annotation.top_tucked_in.value) for s in samples)
    assert len(combos) == 4 and min(combos.values()) >= 200 // 20


def test_garment_colours(samples):
    used = {s.spec.top_garment.color for s in samples}
    assert len(GARMENT_COLORS) >= 8 and len(used) >= 8


def test_prompts_follow_annotation(samples):
    for s in samples:
        assert ("roll up the shirt" in s.prompt) == (s.annotation.sleeves_rolled_up.value == "yes")
        assert ("tuck in the shirt" in s.prompt) == (s.annotation.top_tucked_in.value == "yes")


def test_agnostic_invariant(samples):
    for s in samples[:50]:
        again = make_agnostic(s.person, refine_mask(s.seg, GARMENT_LABELS, 3)).pixels
        assert np.array_equal(again, s.agnostic)


def test_markers_visible_on_short_sleeves(samples):
    short = [s for s in samples if s.annotation.sleeve_length.value != "long"]
    assert sum((s.seg == MARKER).any() for s in short) >= 0.9 * len(short)


def test_value_range(samples):
    s = samples[0]
    for img in (s.person, s.pose, s.agnostic):
        assert img.dtype == np.float32 and img.min() >= -1 and img.max() <= 1
    assert np.array_equal(to_unit(to_uint8(s.person)), s.person)


@pytest.mark.parametrize("res", [(64, 30), (60, 30), (64, 64), (0, 0)])
def test_bad_resolution(res):
    with pytest.raises(ShapeError):
        gen_synthetic(1, resolution=res)


def test_other_resolution():
    s = gen_synthetic(1, resolution=(128, 64))[0]
    assert s.person.shape == (128, 64, 3) and s.seg.shape == (128, 64)


def test_bad_n():
    with pytest.raises(InvalidArgumentError):
        gen_synthetic(0)


# --- on-disk layout ----------------------------------------------------------

def test_write_is_byte_deterministic(tmp_path):
    s = gen_synthetic(10, seed=7)
    a = write_dataset(s, tmp_path / "a", seed=7)
    b = write_dataset(gen_synthetic(10, seed=7), tmp_path / "b", seed=7)
    cmp = filecmp.dircmp(a, b)

    def same(c):
        return not (c.left_only or c.right_only or c.diff_files) and all(same(x) for x in c.subdirs.values())
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert same(cmp)
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


def test_layout_and_roundtrip(tmp_path):
    s = gen_synthetic(10, seed=3)
    root = write_dataset(s, tmp_path, seed=3)
    for d in ("persons", "pose", "seg", "agnostic", "annotations"):
        assert (root / d).is_dir()
    assert (root / "pose" / f"{s[0].id}_pose.png").exists()
    recs = read_dataset(root)
    assert [r.id for r in recs] == [x.id for x in s]
    for r, x in zip(recs, s):
        assert np.array_equal(r.person, x.person)
        assert np.array_equal(r.seg, x.seg)
        assert r.annotation == x.annotation
        assert (r.garments["full"] is None) == (x.garments["full"] is None)


def test_reprocess_from_disk_bit_exact(tmp_path):
    root = write_dataset(gen_synthetic(20, seed=11), tmp_path)
    for r in read_dataset(root):
        agn = make_agnostic(load_image(root / "persons" / f"{r.id}.png"),
                            refine_mask(load_png(root / "seg" / f"{r.id}.png"), GARMENT_LABELS, 3)).pixels
        assert np.array_equal(to_uint8(agn), load_png(root / "agnostic" / f"{r.id}.png"))


def test_garment_manifest(tmp_path):
    root = write_dataset(gen_synthetic(1, seed=0), tmp_path)
    man = tmp_path / "req.json"
    man.write_text('{"upper": "garments/upper/000000.png", "lower": null}')
    g = read_garment_manifest(man)
    assert g["upper"].shape == (64, 32, 3) and g["lower"] is None and g["full"] is None
    man.write_text('{"hat": null}')
    with pytest.raises(InvalidArgumentError):
        read_garment_manifest(man)
    man.write_text('[1, 2]')
    with pytest.raises(InvalidArgumentError):
        read_garment_manifest(man)
