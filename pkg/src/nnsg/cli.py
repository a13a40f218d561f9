"""Command line: ``nnsg fixture | db build | db search | guide | render | metrics``.

Exit status: 0 success, 2 validation/parse error, 3 I/O error,
4 degenerate data (empty render).
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import fixture as fixture_mod
from .errors import NNSGError, ValidationError
from .guidance import GuidanceConfig, extract_guidance, scaled_dilation
from .metrics import MetricReport, SSIMConfig, id_similarity, psnr, ssim
from .morphable import FusionWeights, load_basis, load_params, reconstruct_mesh
from .pngio import mask_to_uint8, to_uint8_rgb, write_png
from .protodb import (
    DEFAULT_EXCLUDE,
    DEFAULT_INCLUDE,
    build_database,
    filter_prototypes,
    ingest_prototypes,
    load_database,
    nearest,
    parse_attribute_table,
    save_database,
)
from .renderer import Camera, rasterize, silhouette_mask

logger = logging.getLogger("nnsg")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DEGENERATE = 0, 2, 3, 4


def _names(value):
    return [v for v in value.split(",") if v] if value else []


def cmd_fixture(args):
    out = fixture_mod.write_fixture(args.out, seed=args.seed)
    print(f"wrote fixture to {out}")
    return EXIT_OK


def cmd_db_build(args):
    attrs_path = Path(args.attrs)
    table = parse_attribute_table(attrs_path.read_bytes(), source=attrs_path)
    selected = filter_prototypes(table, args.include, args.exclude)
    records, missing = ingest_prototypes(args.params_dir, selected)
    print(
        f"selected {len(selected)} of {len(table.filenames)} rows; "
        f"ingested {len(records)}; missing {len(missing)}"
    )
    if not records:
        raise ValidationError("no prototypes selected")
    save_database(build_database(records), args.out)
    print(f"wrote {len(records)} prototypes to {args.out}")
    return EXIT_OK


def cmd_db_search(args):
    db = load_database(args.db)
    query, _ = load_params(args.query)
    for rank, (idx, score) in enumerate(nearest(db, query.alpha, args.k), start=1):
        print(f"{rank} {idx} {db.ids[idx]} {score:.6f}")
    return EXIT_OK


def _camera(args):
    return Camera.for_size(args.size, focal_at_224=args.focal)


def cmd_guide(args):
    face, _ = load_params(args.input)
    db = load_database(args.db)
    basis = load_basis(args.basis)
    (idx, score), = nearest(db, face.alpha, 1)
    ref = db[idx]
    cfg = GuidanceConfig(
        fusion=FusionWeights(args.lam, args.mu),
        omega=args.omega,
        eta=args.eta,
        dilation_px=args.dilation,
        canny_sigma=args.canny_sigma,
        canny_low=args.canny_low,
        canny_high=args.canny_high,
        depth_mode=args.depth_mode,
    )
    bundle = extract_guidance(face, ref.params, basis, _camera(args), cfg, reference_id=ref.id)
    bundle.meta.update(reference_index=idx, reference_score=score, prompt=args.prompt)
    out = bundle.write(args.out_dir)
    print(f"reference {ref.id} (index {idx}, cosine {score:.6f})")
    print(f"wrote depth.png contour.png mask.png manifest.json to {out}")
    return EXIT_OK


def cmd_render(args):
    face, _ = load_params(args.params)
    basis = load_basis(args.basis)
    mesh = reconstruct_mesh(basis, face.alpha, face.beta, face.delta)
    lighting = face.gamma if args.shade else None
    render = rasterize(mesh, face.pose, _camera(args), lighting=lighting)
    write_png(args.out, to_uint8_rgb(render.color))
    if args.mask:
        dilation = args.dilation if args.dilation is not None else scaled_dilation(args.size)
        write_png(args.mask, mask_to_uint8(silhouette_mask(render, dilation)))
    if args.obj:
        Path(args.obj).write_text(mesh.to_obj(), encoding="utf-8")
    print(f"covered {int(render.coverage.sum())} of {render.coverage.size} pixels")
    return EXIT_OK


def _load_pair(path_a, path_b, resize):
    a, b = Image.open(path_a), Image.open(path_b)
    mode = "RGB" if "RGB" in (a.mode, b.mode) else "L"
    a, b = a.convert(mode), b.convert(mode)
    if a.size != b.size:
        if not resize:
            raise ValidationError(
                f"image sizes differ ({a.size} vs {b.size}); pass --resize to resample"
            )
        b = b.resize(a.size, Image.BILINEAR)
    return np.asarray(a), np.asarray(b)


def _gray(img):
    if img.ndim == 2:
        return img.astype(np.float64)
    return img[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def cmd_metrics(args):
    values = {}
    if (args.image_a is None) != (args.image_b is None):
        raise ValidationError("--image-a and --image-b must be given together")
    if (args.params_a is None) != (args.params_b is None):
        raise ValidationError("--params-a and --params-b must be given together")
    if args.image_a is None and args.params_a is None:
        raise ValidationError("nothing to compare: give an image pair and/or a params pair")
    if args.image_a is not None:
        a, b = _load_pair(args.image_a, args.image_b, args.resize)
        values["psnr_db"] = psnr(a, b, 255.0)
        values["ssim"] = ssim(_gray(a), _gray(b), SSIMConfig(data_range=255.0))
    if args.params_a is not None:
        pa, _ = load_params(args.params_a)
        pb, _ = load_params(args.params_b)
        values["id_similarity"] = id_similarity(pa.alpha, pb.alpha)
    sys.stdout.write(MetricReport(**values).to_text())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="nnsg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="write the seeded synthetic fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)

    db = sub.add_parser("db", help="prototype database").add_subparsers(dest="db_command", required=True)
    p = db.add_parser("build", help="curate and ingest prototypes")
    p.add_argument("--attrs", required=True, help="CelebA list_attr text file")
    p.add_argument("--params-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include", type=_names, default=list(DEFAULT_INCLUDE),
                   help="comma-separated attributes that must be +1")
    p.add_argument("--exclude", type=_names, default=list(DEFAULT_EXCLUDE),
                   help="comma-separated attributes that must be -1")
    p.set_defaults(func=cmd_db_build)

    p = db.add_parser("search", help="rank prototypes by identity cosine")
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(func=cmd_db_search)

    def camera_flags(p):
        p.add_argument("--size", type=int, default=512)
        p.add_argument("--focal", type=float, default=1015.0,
                       help="focal length in px at 224 px, scaled with --size")

    p = sub.add_parser("guide", help="extract depth/contour guidance and mask")
    p.add_argument("--input", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out-dir", required=True)
    camera_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--omega", type=float, default=0.3)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--dilation", type=int, default=None,
                   help="mask dilation px (default 8 at 512, scaled)")
    p.add_argument("--canny-sigma", type=float, default=1.4)
    p.add_argument("--canny-low", type=float, default=0.1)
    p.add_argument("--canny-high", type=float, default=0.2)
    p.add_argument("--depth-mode", choices=("inverse", "direct"), default="inverse")
    p.add_argument("--prompt", default="", help="free text recorded in the manifest")
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("render", help="render one face")
    p.add_argument("--params", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True, help="color PNG")
    camera_flags(p)
    p.add_argument("--mask", help="optional silhouette mask PNG")
    p.add_argument("--dilation", type=int, default=None)
    p.add_argument("--obj", help="optional Wavefront mesh export")
    p.add_argument("--shade", action="store_true", help="apply SH lighting from gamma")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="PSNR/SSIM of an image pair, ID similarity of params")
    p.add_argument("--image-a")
    p.add_argument("--image-b")
    p.add_argument("--params-a")
    p.add_argument("--params-b")
    p.add_argument("--resize", action="store_true", help="bilinear-resize image b to a's size")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    try:
        return args.func(args)
    except NNSGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
