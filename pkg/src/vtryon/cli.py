"""Command-line entry point.

Batch jobs (data generation, training) run locally. ``preprocess``, ``tryon``
and ``evaluate`` run locally by default and forward to a running service when
``--server`` is given.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidArgumentError, ParseError, PreconditionError, ShapeError

log = logging.getLogger("vtryon")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 64x32, got {text!r}") from None
    return h, w


def _labels(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"labels must be comma-separated integers, got {text!r}") from None


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .harness.io import write_dataset
    from .harness.synthetic import gen_synthetic
    samples = gen_synthetic(args.n, resolution=args.resolution, seed=args.seed)
    out = write_dataset(samples, args.out, seed=args.seed)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .harness.io import load_image, load_png, save_png
    out = Path(args.out)
    if args.server:
        from .service import schemas as S
        body = {"person_png": S.png_to_b64(load_png(args.person)), "seg_png": S.png_to_b64(load_png(args.seg)),
                "labels": args.labels, "kernel": args.kernel}
        res = _post(args.server, "/preprocess", body)
        save_png(out / "mask.png", S.b64_to_array(res["mask_png"]))
        save_png(out / "agnostic.png", S.b64_to_array(res["agnostic_png"]))
    else:
        from .preprocessing import make_agnostic, refine_mask
        seg = load_png(args.seg)
        if seg.ndim != 2:
            raise InvalidArgumentError("segmentation map must be a single-channel PNG")
        mask = refine_mask(seg, args.labels, args.kernel)
        agn = make_agnostic(load_image(args.person), mask)
        save_png(out / "mask.png", mask)
        save_png(out / "agnostic.png", agn.pixels)
    print(f"wrote {out / 'mask.png'} and {out / 'agnostic.png'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .preprocessing import parse_annotation, validate_annotation
    ann = parse_annotation(Path(args.file).read_text())
    violations = validate_annotation(ann)
    print(json.dumps({"annotation": json.loads(ann.to_json()), "violations": violations}, indent=2))
    return EXIT_INVALID if violations else EXIT_OK


def _dataset_images(root: Path):
    from .harness.io import read_dataset
    recs = read_dataset(root)
    if not recs:
        raise InvalidArgumentError(f"dataset {root} is empty")
    return recs


def cmd_train_codec(args) -> int:
    from .codec import save_codec, train_codec
    from .config import RunConfig
    from .data import coarse_agnostic
    c = (RunConfig.load(args.config) if args.config else RunConfig()).codec
    steps = c.steps if args.steps is None else args.steps
    seed = c.seed if args.seed is None else args.seed
    batch = c.batch_size if args.batch_size is None else args.batch_size
    recs = _dataset_images(Path(args.data))
    imgs = []
    for r in recs:
        imgs += [r.person, r.agnostic, coarse_agnostic(r), r.pose]
        imgs += [g for g in r.garments.values() if g is not None]
    codec = train_codec(np.stack(imgs), steps, seed=seed, batch_size=batch, lr=c.lr, width=c.width,
                        blocks=c.blocks, log_every=args.log_every)
    save_codec(codec, args.out)
    print(f"codec saved to {args.out} (final loss {np.mean(codec.train_losses[-50:]):.5f})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .adit import TryOnModel
    from .codec import load_codec
    from .config import RunConfig
    from .data import LatentData
    from .diffusion import run_training
    from .pipeline import load_model, save_model

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    tcfg = cfg.stage2 if args.stage == 2 else cfg.training
    overrides = {k: v for k, v in (("steps", args.steps), ("batch_size", args.batch_size),
                                   ("seed", args.seed)) if v is not None}
    tcfg = type(tcfg)(**{**tcfg.__dict__, **overrides, "stage": args.stage})
    codec = load_codec(args.codec)
    if args.stage == 2:
        if not args.checkpoint:
            raise PreconditionError("stage 2 needs --checkpoint pointing at a stage-1 model directory")
        model = load_model(args.checkpoint)
    else:
        model = TryOnModel(cfg.model, seed=tcfg.seed)
    recs = _dataset_images(Path(args.data))
    data = LatentData.from_samples(recs, codec, model, zero_pose=args.zero_pose)
    sampler = data.sampler(tcfg.coarse_mask_prob)
    if args.stage == 2:
        model, tlog = run_training(2, tcfg, data.fine(), checkpoint=model, out_dir=args.out, sampler=sampler)
    else:
        model, tlog = run_training(1, tcfg, data.fine(), model=model, out_dir=args.out, sampler=sampler)
    save_model(model, args.out)
    print(f"stage {args.stage}: {len(tlog.losses)} steps, final smoothed loss "
          f"{tlog.smoothed(min(100, max(1, len(tlog.losses))))[-1]:.4f}; saved to {args.out}")
    return EXIT_OK


def _find_sibling(person: Path, folder: str, suffix: str) -> Path | None:
    stem = person.stem
    for cand in (person.with_name(f"{stem}{suffix}.png"), person.parent.parent / folder / f"{stem}{suffix}.png"):
        if cand.exists() and cand.resolve() != person.resolve():
            return cand
    return None


def _tryon_inputs(args):
    """Agnostic image, pose map and garments for one request."""
    from .harness.io import load_image, load_png, read_garment_manifest
    from .preprocessing import make_agnostic, refine_mask
    person = Path(args.person)
    if not person.exists():
        raise InvalidArgumentError(f"person image {person} not found")
    pose_path = Path(args.pose) if args.pose else _find_sibling(person, "pose", "_pose")
    if pose_path is None:
        raise InvalidArgumentError(f"no pose map for {person}; pass --pose or add {person.stem}_pose.png")
    if args.seg:
        agn = make_agnostic(load_image(person), refine_mask(load_png(args.seg), args.labels, 3)).pixels
    else:
        agn_path = Path(args.agnostic) if args.agnostic else _find_sibling(person, "agnostic", "")
        if agn_path is None:
            raise InvalidArgumentError("no agnostic image; pass --agnostic or --seg")
        agn = load_image(agn_path)
    return agn, load_image(pose_path), read_garment_manifest(args.garments)


def cmd_tryon(args) -> int:
    from .harness.io import save_png
    from .harness.synthetic import to_uint8
    agn, pose, garments = _tryon_inputs(args)
    if args.server:
        from .service import schemas as S
        body = {"agnostic_png": S.png_to_b64(to_uint8(agn)), "pose_png": S.png_to_b64(to_uint8(pose)),
                "garments": {k: None if v is None else S.png_to_b64(to_uint8(v)) for k, v in garments.items()},
                "prompt": args.prompt, "seed": args.seed, "guidance": args.guidance, "steps": args.steps}
        out = S.b64_to_array(_post(args.server, "/tryon", body)["image_png"])
    else:
        from .config import SamplerConfig
        from .grm import GarmentSet
        from .pipeline import TryOnSystem
        if not args.model:
            raise UsageError("tryon needs --model DIR (or --server URL)")
        system = TryOnSystem.load(args.model)
        scfg = SamplerConfig(num_steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
        out = system.tryon([agn], [pose], [GarmentSet(**garments)], [args.prompt], scfg)[0]
    save_png(args.out, out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .harness.io import evaluate_dirs, list_images, load_png, write_report
    if args.server:
        from .harness.metrics import MetricReport
        from .service import schemas as S
        enc = lambda d: {p.name: S.png_to_b64(load_png(p)) for p in list_images(d)}
        res = _post(args.server, "/evaluate", {"generated": enc(args.generated), "reference": enc(args.reference)})
        report = MetricReport(**res)
    else:
        report = evaluate_dirs(args.generated, args.reference)
    out = Path(args.out) if args.out else Path(args.generated)
    write_report(report, out)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    uvicorn.run(create_app(args.model), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def _post(server: str, path: str, body: dict) -> dict:
    import httpx
    try:
        r = httpx.post(server.rstrip("/") + path, json=body, timeout=600.0)
    except httpx.HTTPError as exc:
        raise PreconditionError(f"could not reach {server}: {exc}") from None
    if r.status_code == 422:
        raise InvalidArgumentError(r.json().get("detail", r.text))
    if r.status_code != 200:
        raise PreconditionError(f"{path} failed with HTTP {r.status_code}: {r.text}")
    return r.json()


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtryon", description="Desk-scale multi-garment virtual try-on.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset directory")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=_resolution, default=(64, 32))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("preprocess", help="garment mask + agnostic image from a segmentation map")
    g.add_argument("--seg", required=True, help="single-channel label PNG")
    g.add_argument("--person", required=True)
    g.add_argument("--labels", type=_labels, required=True, help="comma-separated garment label ids")
    g.add_argument("--kernel", type=int, default=3)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--server")
    g.set_defaults(func=cmd_preprocess)

    g = sub.add_parser("validate-annotation", help="check an attribute record for rule violations")
    g.add_argument("file")
    g.set_defaults(func=cmd_validate)

    g = sub.add_parser("train-codec", help="fit the latent autoencoder on a dataset directory")
    g.add_argument("--data", required=True)
    g.add_argument("--config", help="JSON or TOML run config (codec section)")
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--log-every", type=int, default=100)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_train_codec)

    g = sub.add_parser("train", help="diffusion training, stage 1 (all) or 2 (person branch)")
    g.add_argument("--stage", type=int, choices=(1, 2), required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--codec", required=True, help="directory holding codec.pt/codec.json")
    g.add_argument("--config", help="JSON or TOML run config")
    g.add_argument("--checkpoint", help="stage-1 model directory (stage 2 only)")
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--zero-pose", action="store_true", help="pose ablation: blank every pose map")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("tryon", help="dress a person in the garments of a manifest")
    g.add_argument("--person", required=True)
    g.add_argument("--garments", required=True, help='JSON manifest {"upper": path|null, ...}')
    g.add_argument("--prompt", default="")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--guidance", type=float, default=2.0)
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--pose", help="pose map (default: <person>_pose.png or ../pose/)")
    g.add_argument("--agnostic", help="agnostic image (default: ../agnostic/<person>.png)")
    g.add_argument("--seg", help="compute the agnostic image from this label map instead")
    g.add_argument("--labels", type=_labels, default=[7, 8, 9])
    g.add_argument("--model", help="directory with codec and model checkpoints")
    g.add_argument("--server", help="forward to a running service instead")
    g.add_argument("--out", default="tryon.png")
    g.set_defaults(func=cmd_tryon)

    g = sub.add_parser("evaluate", help="SSIM/FID/KID between two image directories")
    g.add_argument("--generated", required=True)
    g.add_argument("--reference", required=True)
    g.add_argument("--out", help="report directory (default: --generated)")
    g.add_argument("--server")
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("serve", help="run the HTTP service")
    g.add_argument("--model", help="directory with codec and model checkpoints")
    g.add_argument("--host", default="127.0.0.1")
    g.add_argument("--port", type=int, default=8000)
    g.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vtryon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidArgumentError, ShapeError, ParseError, PreconditionError, FileNotFoundError) as exc:
        print(f"vtryon: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
