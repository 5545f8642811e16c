"""Procedural "garment world": stick-figure persons wearing flat-coloured garments.

Every scene is rendered on a canonical 64x32 canvas and resampled to the
requested resolution. Because the scene spec is known exactly, each sample
carries ground truth for garment regions, body parts, identity markers and
attribute annotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError, ShapeError
from ..preprocessing import (GarmentAnnotation, SleeveLength, YesNo, make_agnostic,
                             refine_mask)

CANVAS_H, CANVAS_W = 64, 32
SLOTS = ("upper", "lower", "full")

# segmentation palette
BACKGROUND, HAIR, FACE, NECK, UPPER_ARM_SKIN, FOREARM_SKIN, LEG_SKIN = 0, 1, 2, 3, 4, 5, 6
UPPER, LOWER, FULL, SHOES, MARKER = 7, 8, 9, 10, 11
GARMENT_LABELS = (UPPER, LOWER, FULL)
COARSE_LABELS = (UPPER, LOWER, FULL, UPPER_ARM_SKIN, FOREARM_SKIN, MARKER)

# body-part palette for the pose map
PART_NAMES = ("background", "head", "torso", "l_upper_arm", "r_upper_arm", "l_forearm",
              "r_forearm", "l_hand", "r_hand", "l_leg", "r_leg", "feet")
FOREARM_PARTS = (5, 6)
PART_COLORS = np.array([
    [0, 0, 0], [255, 200, 0], [0, 90, 255], [255, 0, 90], [90, 255, 0], [255, 120, 200],
    [120, 255, 200], [200, 120, 255], [255, 255, 120], [0, 200, 120], [200, 0, 120],
    [120, 120, 120]], dtype=np.uint8)

GARMENT_COLORS = np.array([
    [200, 30, 30], [30, 150, 40], [30, 60, 200], [230, 200, 20], [240, 120, 20],
    [130, 40, 170], [20, 190, 200], [230, 60, 160], [110, 70, 30], [20, 20, 20],
], dtype=np.uint8)
STRIPE_COLOR = np.array([245, 245, 245], dtype=np.uint8)
SKIN_TONES = np.array([[250, 215, 185], [225, 180, 140], [190, 140, 100], [150, 100, 70],
                       [105, 70, 50]], dtype=np.uint8)
HAIR_COLORS = np.array([[40, 30, 20], [120, 80, 40], [200, 170, 90]], dtype=np.uint8)
BACKGROUNDS = np.array([[205, 205, 205], [215, 200, 180], [180, 195, 215]], dtype=np.uint8)
MARKER_COLORS = np.array([[10, 10, 60], [120, 0, 0], [0, 70, 40]], dtype=np.uint8)
MARKER_SIZE = 4
# bump when rendering changes so cached codecs and runs are not reused
SCENE_VERSION = 3
SHOE_COLOR = np.array([60, 45, 40], dtype=np.uint8)
PRODUCT_BG = np.array([255, 255, 255], dtype=np.uint8)

# (slot, sleeve, rolled, tucked) strata cycled by sample index
STRATA = (
    ("upper", "short", False, False), ("upper", "short", False, True),
    ("upper", "long", False, False), ("upper", "long", False, True),
    ("upper", "long", True, False), ("upper", "long", True, True),
    ("upper", "sleeveless", False, False), ("upper", "sleeveless", False, True),
    ("full", "short", False, False), ("full", "sleeveless", False, False),
)

ROLL_PHRASE = "roll up the shirt"
TUCK_PHRASE = "tuck in the shirt"


@dataclass
class GarmentSpec:
    color: int
    stripes: bool = False
    sleeve_length: str = "long"
    rolled_up: bool = False
    tucked_in: bool = False


@dataclass
class SceneSpec:
    seed: int
    cx: int = 16
    dy: int = 0
    head_r: int = 4
    torso_hw: int = 6
    arm_w: int = 3
    skin: int = 0
    hair: int = 0
    background: int = 0
    markers: list = field(default_factory=list)  # (row, col, color) on canvas
    upper: GarmentSpec | None = None
    lower: GarmentSpec | None = None
    full: GarmentSpec | None = None

    # derived canvas geometry
    @property
    def shoulder(self):
        return 12 + self.dy

    @property
    def waist(self):
        return 33 + self.dy

    @property
    def elbow(self):
        return self.shoulder + 12

    @property
    def wrist(self):
        return self.elbow + 10

    @property
    def leg_bottom(self):
        return 58 + self.dy // 2

    def arm_cols(self, side: int) -> tuple[int, int]:
        if side == 0:
            return self.cx - self.torso_hw - self.arm_w, self.cx - self.torso_hw
        return self.cx + self.torso_hw, self.cx + self.torso_hw + self.arm_w

    @property
    def top_garment(self) -> GarmentSpec:
        return self.full if self.full is not None else self.upper


@dataclass
class SyntheticSample:
    id: str
    spec: SceneSpec
    person: np.ndarray          # H x W x 3 in [-1, 1]
    pose: np.ndarray            # H x W x 3 in [-1, 1], part colour map
    parts: np.ndarray           # H x W body-part ids
    seg: np.ndarray             # H x W segmentation labels
    garments: dict              # slot -> H x W x 3 product image or None
    agnostic: np.ndarray
    mask: np.ndarray            # {0, 255} mask used for ``agnostic``
    annotation: GarmentAnnotation
    prompt: str


def to_unit(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _sleeve_rows(spec: SceneSpec, g: GarmentSpec) -> int:
    """Last canvas row (exclusive) covered by the sleeve."""
    if g.sleeve_length == "sleeveless":
        return spec.shoulder
    if g.sleeve_length == "short":
        return spec.shoulder + 7
    if g.rolled_up:
        return spec.elbow + 2
    return spec.wrist


def _paint(canvas, seg, region, color, label, stripes=False, stripe_origin=0):
    canvas[region] = color
    if stripes:
        rows = np.arange(canvas.shape[0])[:, None] * np.ones((1, canvas.shape[1]), dtype=int)
        band = region & (((rows - stripe_origin) // 2) % 3 == 2)
        canvas[band] = STRIPE_COLOR
    seg[region] = label


def render_scene(spec: SceneSpec):
    """Rasterise a scene on the canonical canvas.

    Returns ``(person_u8, seg, parts)``.
    """
    H, W = CANVAS_H, CANVAS_W
    rr, cc = np.mgrid[0:H, 0:W]
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[spec.background]
    seg = np.zeros((H, W), dtype=np.int64)
    parts = np.zeros((H, W), dtype=np.int64)
    skin = SKIN_TONES[spec.skin]

    def box(r0, r1, c0, c1):
        return (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)

    head_c = (spec.shoulder - spec.head_r - 2, spec.cx - 0.5)
    head = (rr - head_c[0]) ** 2 + (cc - head_c[1]) ** 2 <= spec.head_r ** 2 + 0.5
    hair = head & (rr < head_c[0] - spec.head_r / 3)
    neck = box(head_c[0] + spec.head_r - 1, spec.shoulder, spec.cx - 2, spec.cx + 1)
    torso = box(spec.shoulder, spec.waist, spec.cx - spec.torso_hw, spec.cx + spec.torso_hw)
    legs = box(spec.waist, spec.leg_bottom, spec.cx - spec.torso_hw + 1, spec.cx + spec.torso_hw - 1)
    crotch = spec.waist + 6
    legs &= ~((rr >= crotch) & (cc >= spec.cx - 1) & (cc < spec.cx + 1))
    feet = box(spec.leg_bottom, spec.leg_bottom + 3, spec.cx - spec.torso_hw, spec.cx + spec.torso_hw)
    feet &= ~((cc >= spec.cx - 1) & (cc < spec.cx + 1))

    img[head | neck] = skin
    seg[head] = FACE
    seg[neck] = NECK
    img[hair] = HAIR_COLORS[spec.hair]
    seg[hair] = HAIR
    parts[head | neck] = 1
    img[torso] = skin
    seg[torso] = NECK
    parts[torso] = 2
    img[legs] = skin
    seg[legs] = LEG_SKIN
    parts[legs & (cc < spec.cx)] = 9
    parts[legs & (cc >= spec.cx)] = 10
    img[feet] = SHOE_COLOR
    seg[feet] = SHOES
    parts[feet] = 11

    arms = []
    for side in (0, 1):
        c0, c1 = spec.arm_cols(side)
        upper_arm = box(spec.shoulder + 1, spec.elbow, c0, c1)
        forearm = box(spec.elbow, spec.wrist, c0, c1)
        hand = box(spec.wrist, spec.wrist + 3, c0, c1)
        img[upper_arm | forearm | hand] = skin
        seg[upper_arm] = UPPER_ARM_SKIN
        seg[forearm | hand] = FOREARM_SKIN
        parts[upper_arm] = 3 + side
        parts[forearm] = 5 + side
        parts[hand] = 7 + side
        arms.append((upper_arm | forearm, c0, c1))

    if spec.lower is not None:
        g = spec.lower
        _paint(img, seg, legs, GARMENT_COLORS[g.color], LOWER, g.stripes, spec.waist)

    top = spec.top_garment
    if top is not None:
        if spec.full is not None:
            body = box(spec.shoulder, spec.waist + 14, spec.cx - spec.torso_hw, spec.cx + spec.torso_hw)
            label = FULL
        else:
            hem = spec.waist if top.tucked_in else spec.waist + 5
            body = box(spec.shoulder, hem, spec.cx - spec.torso_hw, spec.cx + spec.torso_hw)
            label = UPPER
        sleeve_end = _sleeve_rows(spec, top)
        for arm, c0, c1 in arms:
            body |= arm & (rr < sleeve_end)
        _paint(img, seg, body, GARMENT_COLORS[top.color], label, top.stripes, spec.shoulder)
        if top.rolled_up and top.sleeve_length == "long":
            for arm, c0, c1 in arms:
                cuff = arm & (rr >= sleeve_end - 2) & (rr < sleeve_end)
                img[cuff] = (GARMENT_COLORS[top.color].astype(int) * 3 // 4).astype(np.uint8)

    for r, c, color in spec.markers:
        dot = box(r, r + MARKER_SIZE, c, c + MARKER_SIZE)
        img[dot] = MARKER_COLORS[color]
        seg[dot] = MARKER
    return img, seg, parts


def render_product(g: GarmentSpec, slot: str) -> np.ndarray:
    """Flat 'product shot' of one garment on a white canvas (sleeves always unrolled)."""
    H, W = CANVAS_H, CANVAS_W
    rr, cc = np.mgrid[0:H, 0:W]
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = PRODUCT_BG
    seg = np.zeros((H, W), dtype=np.int64)

    def box(r0, r1, c0, c1):
        return (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)

    top, cx, hw = 12, 16, 6
    if slot == "lower":
        region = box(22, 60, cx - hw + 1, cx + hw - 1) & ~((rr >= 28) & (cc >= cx - 1) & (cc < cx + 1))
        origin = 22
    else:
        bottom = top + 35 if slot == "full" else top + 26
        region = box(top, bottom, cx - hw, cx + hw)
        sleeve_end = {"sleeveless": top, "short": top + 8}.get(g.sleeve_length, top + 23)
        region |= box(top + 1, sleeve_end, cx - hw - 4, cx - hw)
        region |= box(top + 1, sleeve_end, cx + hw, cx + hw + 4)
        origin = top
    _paint(img, seg, region, GARMENT_COLORS[g.color], 1, g.stripes, origin)
    return img


def _resample(arr: np.ndarray, H: int, W: int) -> np.ndarray:
    rows = (np.arange(H) * CANVAS_H) // H
    cols = (np.arange(W) * CANVAS_W) // W
    return arr[rows][:, cols]


def check_resolution(resolution, multiple: int = 8) -> tuple[int, int]:
    H, W = resolution
    if H <= 0 or W <= 0 or H % multiple or W % multiple or H != 2 * W:
        raise ShapeError(f"resolution {resolution} must be H = 2W with both divisible by {multiple}")
    return H, W


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def random_scene(seed: int, index: int) -> SceneSpec:
    rng = sample_rng(seed, index)
    slot, sleeve, rolled, tucked = STRATA[index % len(STRATA)]
    spec = SceneSpec(
        seed=int(rng.integers(2 ** 31)),
        cx=16 + int(rng.integers(-1, 2)),
        dy=int(rng.integers(0, 3)),
        head_r=int(rng.integers(4, 6)),
        torso_hw=int(rng.integers(5, 8)),
        arm_w=int(rng.integers(4, 6)),
        skin=int(rng.integers(len(SKIN_TONES))),
        hair=int(rng.integers(len(HAIR_COLORS))),
        background=int(rng.integers(len(BACKGROUNDS))),
    )
    colors = rng.choice(len(GARMENT_COLORS), size=2, replace=False)
    top = GarmentSpec(color=int(colors[0]), stripes=bool(rng.random() < 0.3),
                      sleeve_length=sleeve, rolled_up=rolled, tucked_in=tucked)
    if slot == "full":
        top.tucked_in = False
        spec.full = top
    else:
        spec.upper = top
        spec.lower = GarmentSpec(color=int(colors[1]), stripes=bool(rng.random() < 0.2),
                                 sleeve_length="long")
    spec.markers = _place_markers(spec, rng)
    return spec


def _place_markers(spec: SceneSpec, rng) -> list:
    top = spec.top_garment
    visible_from = _sleeve_rows(spec, top)
    first = max(visible_from, spec.elbow)
    markers = []
    if first + MARKER_SIZE > spec.wrist:
        return markers
    for side in rng.permutation(2)[: int(rng.integers(1, 3))]:
        c0, c1 = spec.arm_cols(int(side))
        r = int(rng.integers(first, spec.wrist - MARKER_SIZE + 1))
        c = int(rng.integers(c0, c1 - MARKER_SIZE + 1))
        markers.append((r, c, int(rng.integers(len(MARKER_COLORS)))))
    return markers


def annotation_for(spec: SceneSpec, image_path: str = "") -> GarmentAnnotation:
    top = spec.top_garment
    rolled = YesNo.YES if top.rolled_up else YesNo.NO
    return GarmentAnnotation(
        sleeve_length=SleeveLength(top.sleeve_length),
        sleeves_rolled_up=rolled,
        top_tucked_in=YesNo.YES if top.tucked_in else YesNo.NO,
        wearing_outer_top=YesNo.NO,
        outer_top_open=YesNo.NO,
        fit="regular",
        image_path=image_path,
    )


def prompt_for(annotation: GarmentAnnotation) -> str:
    phrases = []
    if annotation.sleeves_rolled_up is YesNo.YES:
        phrases.append(ROLL_PHRASE)
    if annotation.top_tucked_in is YesNo.YES:
        phrases.append(TUCK_PHRASE)
    return " and ".join(phrases)


def render_sample(spec: SceneSpec, sample_id: str, resolution=(CANVAS_H, CANVAS_W),
                  mask_labels=GARMENT_LABELS, kernel: int = 3) -> SyntheticSample:
    H, W = resolution
    person_u8, seg, parts = render_scene(spec)
    person = to_unit(_resample(person_u8, H, W))
    seg = _resample(seg, H, W)
    parts = _resample(parts, H, W)
    pose = to_unit(PART_COLORS[parts])
    garments = {}
    for slot in SLOTS:
        g = getattr(spec, slot)
        garments[slot] = None if g is None else to_unit(_resample(render_product(g, slot), H, W))
    mask = refine_mask(seg, mask_labels, kernel)
    agnostic = make_agnostic(person, mask).pixels
    annotation = annotation_for(spec, f"persons/{sample_id}.png")
    return SyntheticSample(
        id=sample_id, spec=spec, person=person, pose=pose, parts=parts, seg=seg,
        garments=garments, agnostic=agnostic, mask=mask, annotation=annotation,
        prompt=prompt_for(annotation))


def gen_synthetic(n: int, resolution=(CANVAS_H, CANVAS_W), seed: int = 0,
                  start: int = 0) -> list[SyntheticSample]:
    """Generate ``n`` samples; sample ``i`` depends only on ``(seed, start + i)``.

    Strata over sleeve length, roll-up and tuck-in (plus full-body garments) are
    cycled by index, so any ``n`` consecutive samples cover them evenly.
    """
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    H, W = check_resolution(resolution)
    return [render_sample(random_scene(seed, i), f"{i:06d}", (H, W))
            for i in range(start, start + n)]


def blank_image(resolution) -> np.ndarray:
    H, W = resolution
    return np.zeros((H, W, 3), dtype=np.float32)


def garment_foreground(product: np.ndarray) -> np.ndarray:
    """Boolean mask of non-background pixels in a product image."""
    bg = to_unit(PRODUCT_BG)
    return np.abs(product - bg).max(axis=-1) > 1e-3
