"""Desk-scale experiments: codec + two-stage diffusion training and try-on evaluation.

Everything expensive is cached under an artifact directory keyed by a hash of
the settings that produced it, so the ablations and the end-to-end run can
share work (the with-skip ablation run is the with-pose ablation run).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..adit import TryOnModel
from ..codec import LatentCodec, load_codec, save_codec, train_codec
from ..config import (CodecConfig, DataConfig, EvalConfig, ModelConfig, RunConfig, SamplerConfig,
                      TrainingConfig)
from ..data import LatentData, coarse_agnostic
from ..diffusion import TrainingLog, make_schedule, run_training, validation_loss
from ..grm import GarmentSet
from ..pipeline import TryOnSystem, load_model, save_model
from .metrics import identity_preservation, transfer_fidelity
from .synthetic import (FOREARM_PARTS, GARMENT_COLORS, SCENE_VERSION, SKIN_TONES, STRATA, SceneSpec,
                        SyntheticSample, gen_synthetic, random_scene, render_sample, to_unit)

log = logging.getLogger(__name__)

HELDOUT_SEED_OFFSET = 1_000_003


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass
class WorldConfig:
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "WorldConfig":
        return cls(cfg.data, cfg.codec)


# --- codec and latents -------------------------------------------------------

def codec_images(samples: list[SyntheticSample]) -> np.ndarray:
    """Everything the codec must represent: persons, agnostics, pose maps, products."""
    imgs = []
    for s in samples:
        imgs += [s.person, s.agnostic, coarse_agnostic(s), s.pose]
        imgs += [g for g in s.garments.values() if g is not None]
    return np.stack(imgs)


def codec_dir(world: WorldConfig, cache: Path) -> Path:
    key = _key(["codec", SCENE_VERSION, world.data.n_codec, world.data.seed, asdict(world.codec)])
    return Path(cache) / f"codec-{key}"


def get_codec(world: WorldConfig, cache: Path) -> LatentCodec:
    d = codec_dir(world, cache)
    if (d / "codec.json").exists():
        return load_codec(d)
    t0 = time.time()
    c = world.codec
    samples = gen_synthetic(world.data.n_codec, seed=world.data.seed)
    codec = train_codec(codec_images(samples), c.steps, seed=c.seed, batch_size=c.batch_size, lr=c.lr,
                        width=c.width, blocks=c.blocks, log_every=200)
    save_codec(codec, d)
    (d / "losses.json").write_text(json.dumps({"losses": codec.train_losses, "seconds": time.time() - t0}))
    log.info("codec trained in %.0fs", time.time() - t0)
    return codec


def codec_log(world: WorldConfig, cache: Path) -> dict:
    return json.loads((codec_dir(world, cache) / "losses.json").read_text())


def train_samples(world: WorldConfig) -> list[SyntheticSample]:
    return gen_synthetic(world.data.n_train, seed=world.data.seed)


def val_samples(world: WorldConfig) -> list[SyntheticSample]:
    return gen_synthetic(world.data.n_val, seed=world.data.seed + HELDOUT_SEED_OFFSET + 7)


# --- diffusion training ------------------------------------------------------

@dataclass
class RunSpec:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainingConfig = field(default_factory=TrainingConfig)
    stage2: TrainingConfig | None = None
    zero_pose: bool = False

    def key(self, world: WorldConfig) -> str:
        s2 = asdict(self.stage2) if self.stage2 else None
        return _key([SCENE_VERSION, asdict(world), asdict(self.model), asdict(self.stage1), s2, self.zero_pose])


@dataclass
class RunResult:
    system: TryOnSystem
    stage1_log: dict
    stage2_log: dict | None
    directory: Path
    seconds: float


def _log_dict(tlog: TrainingLog) -> dict:
    return {"losses": tlog.losses, "val_steps": tlog.val_steps, "val_losses": tlog.val_losses}


def train_run(world: WorldConfig, spec: RunSpec, cache: str | Path) -> RunResult:
    """Train (or load from cache) a model for ``spec``; returns the try-on system."""
    cache = Path(cache)
    codec = get_codec(world, cache)
    d = cache / f"run-{spec.key(world)}"
    if (d / "done.json").exists():
        meta = json.loads((d / "done.json").read_text())
        return RunResult(TryOnSystem(codec, load_model(d)), meta["stage1"], meta.get("stage2"), d,
                         meta["seconds"])
    t0 = time.time()
    model = TryOnModel(spec.model, seed=spec.stage1.seed)
    data = LatentData.from_samples(train_samples(world), codec, model, zero_pose=spec.zero_pose)
    val = LatentData.from_samples(val_samples(world), codec, model, zero_pose=spec.zero_pose).fine()
    d.mkdir(parents=True, exist_ok=True)
    model, log1 = run_training(1, spec.stage1, data.fine(), model=model, val_data=val, out_dir=d,
                               sampler=data.sampler(spec.stage1.coarse_mask_prob))
    meta = {"stage1": _log_dict(log1), "stage2": None}
    if spec.stage2 is not None and spec.stage2.steps > 0:
        model, log2 = run_training(2, spec.stage2, data.fine(), checkpoint=model, val_data=val,
                                   out_dir=d, sampler=data.sampler(spec.stage2.coarse_mask_prob))
        meta["stage2"] = _log_dict(log2)
    meta["seconds"] = time.time() - t0
    save_model(model, d)
    (d / "done.json").write_text(json.dumps(meta))
    return RunResult(TryOnSystem(codec, model), meta["stage1"], meta["stage2"], d, meta["seconds"])


def final_val_loss(result: RunResult, window: int = 3) -> float:
    """Mean of the last ``window`` validation evaluations."""
    v = result.stage1_log["val_losses"]
    return float(np.mean(v[-window:]))


# --- evaluation cases --------------------------------------------------------

def _core_regions(spec: SceneSpec, H: int, W: int) -> dict[str, np.ndarray]:
    """Garment regions that every layout covers: torso core (upper/full) and thighs (lower)."""
    rr, cc = np.mgrid[0:64, 0:32]

    def box(r0, r1, c0, c1):
        return (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)

    torso = box(spec.shoulder + 2, spec.waist - 2, spec.cx - spec.torso_hw + 2, spec.cx + spec.torso_hw - 2)
    thigh = (box(spec.waist + 7, spec.waist + 16, spec.cx - spec.torso_hw + 2, spec.cx - 2)
             | box(spec.waist + 7, spec.waist + 16, spec.cx + 2, spec.cx + spec.torso_hw - 2))
    rows = (np.arange(H) * 64) // H
    cols = (np.arange(W) * 32) // W
    out = {"upper": torso, "full": torso, "lower": thigh}
    return {k: v[rows][:, cols] for k, v in out.items()}


@dataclass
class TryOnCase:
    person: SyntheticSample
    garments: dict            # slot -> product image or None
    prompt: str
    truth: np.ndarray         # person rendered wearing the requested garments
    regions: dict             # slot -> core region on the person
    keep: np.ndarray          # pixels the try-on must leave alone
    markers: np.ndarray


def _non_full(seed: int, start: int, count: int) -> list[int]:
    idx = []
    i = start
    while len(idx) < count:
        if STRATA[i % len(STRATA)][0] != "full":
            idx.append(i)
        i += 1
    return idx


def unpaired_cases(n: int, seed: int = 0, resolution=(64, 32)) -> list[TryOnCase]:
    """Held-out persons paired with another held-out person's upper and lower garments."""
    hseed = seed + HELDOUT_SEED_OFFSET
    persons = _non_full(hseed, 0, n)
    donors = _non_full(hseed + 1, 0, n)
    H, W = resolution
    cases = []
    for k, (pi, di) in enumerate(zip(persons, donors)):
        pspec = random_scene(hseed, pi)
        dspec = random_scene(hseed + 1, di)
        # donor colours must differ from what the person already wears
        if dspec.upper.color == pspec.upper.color or dspec.lower.color == pspec.lower.color:
            dspec.upper.color, dspec.lower.color = dspec.lower.color, dspec.upper.color
        if dspec.upper.color == pspec.upper.color or dspec.lower.color == pspec.lower.color:
            free = [c for c in range(len(GARMENT_COLORS)) if c not in (pspec.upper.color, pspec.lower.color)]
            dspec.upper.color, dspec.lower.color = free[k % len(free)], free[(k + 3) % len(free)]
        person = render_sample(pspec, f"p{pi:06d}", resolution)
        donor = render_sample(dspec, f"d{di:06d}", resolution)
        worn = replace(pspec,
                       upper=replace(pspec.upper, color=dspec.upper.color, stripes=dspec.upper.stripes),
                       lower=replace(pspec.lower, color=dspec.lower.color, stripes=dspec.lower.stripes))
        truth = render_sample(worn, f"t{pi:06d}", resolution).person
        regions = _core_regions(pspec, H, W)
        keep = person.mask == 0
        cases.append(TryOnCase(
            person=person,
            garments={"upper": donor.garments["upper"], "lower": donor.garments["lower"], "full": None},
            prompt=person.prompt, truth=truth,
            regions={"upper": regions["upper"], "lower": regions["lower"]},
            keep=keep, markers=(person.seg == 11) & keep))
    return cases


def probe_persons(n: int, seed: int = 0, resolution=(64, 32)) -> list[SyntheticSample]:
    """Held-out persons in long, unrolled, untucked tops (the empty prompt describes them)."""
    hseed = seed + HELDOUT_SEED_OFFSET + 2
    target = STRATA.index(("upper", "long", False, False))
    idx = [target + len(STRATA) * k for k in range(n)]
    return [render_sample(random_scene(hseed, i), f"q{i:06d}", resolution) for i in idx]


def sleeve_coverage(image: np.ndarray, sample: SyntheticSample) -> float:
    """Fraction of lower-forearm pixels closer to the garment colour than to skin."""
    spec = sample.spec
    rows = np.arange(image.shape[0])[:, None] * 64 // image.shape[0]
    region = np.isin(sample.parts, FOREARM_PARTS) & (rows >= spec.elbow + 2) & (rows < spec.wrist)
    garment = to_unit(GARMENT_COLORS[spec.upper.color])
    skin = to_unit(SKIN_TONES[spec.skin])
    px = np.asarray(image, np.float64)[region]
    closer = np.linalg.norm(px - garment, axis=-1) < np.linalg.norm(px - skin, axis=-1)
    return float(closer.mean())


# --- evaluation --------------------------------------------------------------

@dataclass
class TryOnEval:
    transfer_rate: float
    identity_rate: float
    identity_score: float          # mean region SSIM
    transfer_distances: list
    identity_scores: list
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _pose_for(sample: SyntheticSample, zero_pose: bool) -> np.ndarray:
    return np.zeros_like(sample.pose) if zero_pose else sample.pose


def evaluate_unpaired(system: TryOnSystem, cases: list[TryOnCase], ecfg: EvalConfig | None = None,
                      scfg: SamplerConfig | None = None, zero_pose: bool = False,
                      return_images: bool = False):
    ecfg = ecfg or EvalConfig()
    outs = system.tryon([c.person.agnostic for c in cases], [_pose_for(c.person, zero_pose) for c in cases],
                        [GarmentSet(**c.garments) for c in cases], [c.prompt for c in cases], scfg)
    t_pass, i_pass, dists, scores = [], [], [], []
    for c, out in zip(cases, outs):
        ok, worst = True, 0.0
        for slot, region in c.regions.items():
            # target colour: the requested garment as it appears on this body
            passed, dist = transfer_fidelity(out, c.truth, region, region, ecfg.transfer_threshold)
            ok &= passed
            worst = max(worst, dist)
        t_pass.append(ok)
        dists.append(worst)
        passed, score = identity_preservation(out, c.person.person, c.keep, c.markers,
                                              ssim_gate=ecfg.identity_ssim_gate, marker_dist=ecfg.marker_distance,
                                              marker_fraction=ecfg.marker_fraction)
        i_pass.append(passed)
        scores.append(score)
    result = TryOnEval(float(np.mean(t_pass)), float(np.mean(i_pass)), float(np.mean(scores)),
                       dists, scores, len(cases))
    return (result, outs) if return_images else result


@dataclass
class ProbeEval:
    flip_rate: float
    coverage_roll: list
    coverage_empty: list
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def prompt_probe(system: TryOnSystem, persons: list[SyntheticSample], scfg: SamplerConfig | None = None,
                 prompt: str = "roll up the shirt", zero_pose: bool = False) -> ProbeEval:
    """Same person, garment and noise; only the prompt differs. A flip is counted when
    the edited prompt leaves less of the forearm covered by sleeve."""
    agn = [coarse_agnostic(p) for p in persons]
    pose = [_pose_for(p, zero_pose) for p in persons]
    gs = [GarmentSet(**p.garments) for p in persons]
    roll = system.tryon(agn, pose, gs, [prompt] * len(persons), scfg)
    empty = system.tryon(agn, pose, gs, [""] * len(persons), scfg)
    cr = [sleeve_coverage(o, p) for o, p in zip(roll, persons)]
    ce = [sleeve_coverage(o, p) for o, p in zip(empty, persons)]
    flips = [a < b for a, b in zip(cr, ce)]
    return ProbeEval(float(np.mean(flips)), cr, ce, len(persons))


def validation_loss_of(system: TryOnSystem, world: WorldConfig, zero_pose: bool = False) -> float:
    val = LatentData.from_samples(val_samples(world), system.codec, system.model, zero_pose=zero_pose).fine()
    return validation_loss(system.model, val, make_schedule())
