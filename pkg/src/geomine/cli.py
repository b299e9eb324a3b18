"""Command-line front end.

Every subcommand reads its inputs, calls one library operation, writes any
artifacts, and prints a ``key=value`` report (keys sorted) to stdout.
Exit status: 0 success / accepted, 2 rejected by the quality gate, 1 error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import geometry, metrics, quality, registration, srloss
from .coupled import (
    ACCEPTED,
    REJECTED,
    CoupledConfig,
    RunReport,
    checkerboard_noise_producer,
    coupled_run,
    identity_producer,
)
from .imgcore import (
    ScalarField,
    decode_field,
    decode_image,
    encode_field,
    encode_image,
    encode_scalar,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with "rejected"
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _paths(text: str) -> list[str]:
    items = [s for s in text.split(",") if s]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated path list")
    return items


def _read(path: str) -> bytes:
    return Path(path).read_bytes()


def _write(path: str, data: bytes) -> None:
    Path(path).write_bytes(data)


def _image(path: str):
    return decode_image(_read(path))


def _field(path: str):
    return decode_field(_read(path))


def _reg_params(args) -> registration.RegParams:
    return registration.RegParams(
        levels=args.levels,
        iters_per_level=args.iters,
        step=args.step,
        smooth_weight=args.smooth,
        tol=args.tol,
    )


def _stats(prefix: str, arr: np.ndarray) -> dict:
    return {
        f"{prefix}_min": float(arr.min()),
        f"{prefix}_max": float(arr.max()),
        f"{prefix}_mean": float(np.mean(arr)),
    }


# --------------------------------------------------------------------------
# handlers
# --------------------------------------------------------------------------

def cmd_register(args) -> RunReport:
    fixed, moving = _image(args.fixed), _image(args.moving)
    res = registration.register_with_trace(fixed, moving, _reg_params(args))
    _write(args.out, encode_field(res.field))
    u = res.field.data
    m = {
        "energy_initial": res.initial_energy,
        "energy_final": res.final_energy,
        "max_displacement": float(np.max(np.abs(u))),
        "mean_dx": float(np.mean(u[..., 0])),
        "mean_dy": float(np.mean(u[..., 1])),
    }
    for t in res.levels:
        m[f"steps_level{t.level}"] = len(t.energies) - 1
    return RunReport("register", [args.fixed, args.moving], [args.out], m)


def cmd_warp(args) -> RunReport:
    out = registration.warp(_image(args.image), _field(args.field))
    _write(args.out, encode_image(out))
    return RunReport("warp", [args.image, args.field], [args.out], _stats("intensity", out.data))


def cmd_atlas(args) -> RunReport:
    images = [_image(p) for p in args.images]
    atlas = registration.build_atlas(images, _reg_params(args), args.rounds)
    _write(args.out, encode_image(atlas))
    m = {"n_images": len(images), "rounds": args.rounds}
    m.update(_stats("intensity", atlas.data))
    return RunReport("atlas", list(args.images), [args.out], m)


def cmd_jd(args) -> RunReport:
    jd = geometry.jacobian_determinant(_field(args.field))
    outputs = [args.out]
    _write(args.out, encode_image(geometry.field_to_image(jd)))
    if args.raw:
        _write(args.raw, encode_scalar(jd))
        outputs.append(args.raw)
    m = _stats("jd", jd.data)
    m["jd_nonpositive"] = int(np.count_nonzero(jd.data <= 0))
    return RunReport("jd", [args.field], outputs, m)


def cmd_curl(args) -> RunReport:
    fld = _field(args.field)
    cv = geometry.curl(fld)
    vec = geometry.curl_vector(fld)
    _write(args.out, encode_field(vec))
    outputs = [args.out]
    planes = [cv.data] if fld.channels == 2 else [vec.data[..., k] for k in range(3)]
    if args.images:
        if len(args.images) != len(planes):
            raise UsageError(
                f"--images needs {len(planes)} path(s) for a {fld.channels}-channel field"
            )
        for path, plane in zip(args.images, planes):
            _write(path, encode_image(geometry.field_to_image(ScalarField(plane))))
            outputs.append(path)
    m = {}
    for k, plane in enumerate(planes):
        m.update(_stats(f"curl{k}" if len(planes) > 1 else "curl", plane))
    return RunReport("curl", [args.field], outputs, m)


def cmd_grid(args) -> RunReport:
    fld = _field(args.field)
    img = geometry.render_grid(fld, geometry.GridRenderParams(spacing=args.spacing))
    _write(args.out, encode_image(img))
    return RunReport("grid", [args.field], [args.out], {"spacing": args.spacing})


def cmd_metrics_img(args) -> RunReport:
    q = metrics.image_quality(_image(args.x), _image(args.y))
    return RunReport("metrics img", [args.x, args.y], [], {"mse": q.mse, "psnr": q.psnr, "ssim": q.ssim})


def cmd_metrics_det(args) -> RunReport:
    dets = metrics.parse_detections_csv(_read(args.dets))
    gts = [g for p in args.gt for g in metrics.parse_voc_xml(_read(p))]
    ev = metrics.evaluate_detections(dets, gts, args.iou)
    m = {"map": ev.mean_ap, "n_detections": len(dets), "n_ground_truth": len(gts),
         "warnings": len(ev.warnings)}
    for label, ap in ev.ap.items():
        m[f"ap.{label}"] = ap
    for w in ev.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return RunReport("metrics det", [args.dets, *args.gt], [], m)


def cmd_metrics_rtp(args) -> RunReport:
    preds = [metrics.parse_label_csv(_read(p)) for p in args.preds]
    value = metrics.rtp(preds)
    m = {"rtp": value, "n_models": len(preds), "n_images": len(preds[0])}
    return RunReport("metrics rtp", list(args.preds), [], m)


def cmd_srloss_down4(args) -> RunReport:
    out = srloss.downsample4x(_image(args.image))
    _write(args.out, encode_image(out))
    return RunReport("srloss down4", [args.image], [args.out], {"width": out.width, "height": out.height})


def cmd_srloss_adv(args) -> RunReport:
    real = quality.parse_vector_csv(_read(args.dreal))
    fake = quality.parse_vector_csv(_read(args.dfake))
    value = srloss.adversarial_objective(real, fake)
    return RunReport("srloss adv", [args.dreal, args.dfake], [], {"adversarial_objective": value})


def cmd_srloss_feat(args) -> RunReport:
    if args.extractor == "identity":
        phi = srloss.IdentityExtractor()
    else:
        phi = srloss.ConvExtractor(seed=args.seed, depth=args.depth)
    value = srloss.feature_loss(_image(args.hr), _image(args.sr), phi)
    return RunReport("srloss feat", [args.hr, args.sr], [], {"feature_loss": value})


def cmd_srloss_cv(args) -> RunReport:
    value = srloss.cv_loss(_image(args.hr), _image(args.sr), _image(args.ref), _reg_params(args))
    return RunReport("srloss cv", [args.hr, args.sr, args.ref], [], {"cv_loss": value})


def cmd_quality_eval(args) -> RunReport:
    e = quality.EvalMatrix(quality.parse_matrix_csv(_read(args.matrix)),
                           quality.parse_vector_csv(_read(args.weights)))
    x = quality.ordered_attribute_eval(e)
    m = {f"x.{i}": float(v) for i, v in enumerate(x)}
    return RunReport("quality eval", [args.matrix, args.weights], [], m)


def cmd_quality_select(args) -> RunReport:
    tasks = quality.parse_tasks_csv(_read(args.tasks))
    by_id = {t.id: t for t in tasks}
    if args.anchor not in by_id:
        raise UsageError(f"anchor task {args.anchor!r} not found in {args.tasks}")
    candidates = [t for t in tasks if t.id != args.anchor]
    model = quality.RegressionModel.zeros(by_id[args.anchor].n_features)
    sel = quality.select_meta_tasks(candidates, by_id[args.anchor], model, args.n)
    m = {"selected": ",".join(sel.ids), "excluded": ",".join(sel.excluded),
         "flagged": int(sel.flagged)}
    for tid, score in sel.scores.items():
        m[f"cosine.{tid}"] = score
    return RunReport("quality select", [args.tasks], [], m)


def cmd_quality_fit(args) -> RunReport:
    tasks = quality.parse_tasks_csv(_read(args.tasks))
    res = quality.joint_gradient_fit(tasks, args.steps, args.lr)
    m = {f"w.{i}": float(v) for i, v in enumerate(res.model.weights)}
    m["bias"] = res.model.bias
    m["loss_final"] = res.losses[-1] if res.losses else quality.joint_loss(tasks, res.model)
    m["steps"] = args.steps
    return RunReport("quality fit", [args.tasks], [], m)


def cmd_coupled(args) -> RunReport:
    cfg = CoupledConfig(args.max_iters, args.psnr_min, args.ssim_min, args.penalty)
    producer = identity_producer if args.producer == "identity" else checkerboard_noise_producer
    report = coupled_run(_image(args.input), producer, _image(args.ref), cfg, args.amplitude)
    report.inputs = [args.input, args.ref]
    return report


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_reg_flags(p: argparse.ArgumentParser) -> None:
    d = registration.RegParams()
    p.add_argument("--levels", type=int, default=d.levels)
    p.add_argument("--iters", type=int, default=d.iters_per_level)
    p.add_argument("--step", type=float, default=d.step)
    p.add_argument("--smooth", type=float, default=d.smooth_weight)
    p.add_argument("--tol", type=float, default=d.tol)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geomine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("register", help="register a moving image onto a fixed image")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out", required=True)
    _add_reg_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="backward-warp an image by a field")
    p.add_argument("--image", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("atlas", help="build a template from a set of images")
    p.add_argument("--images", type=_paths, required=True)
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_reg_flags(p)
    p.set_defaults(func=cmd_atlas)

    p = sub.add_parser("jd", help="Jacobian determinant image of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw")
    p.set_defaults(func=cmd_jd)

    p = sub.add_parser("curl", help="curl of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=_paths)
    p.set_defaults(func=cmd_curl)

    p = sub.add_parser("grid", help="deformed-grid rendering of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--spacing", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    mp = sub.add_parser("metrics", help="quality and detection metrics")
    msub = mp.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    p = msub.add_parser("img")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.set_defaults(func=cmd_metrics_img)
    p = msub.add_parser("det")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", type=_paths, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_metrics_det)
    p = msub.add_parser("rtp")
    p.add_argument("--preds", type=_paths, required=True)
    p.set_defaults(func=cmd_metrics_rtp)

    sp = sub.add_parser("srloss", help="super-resolution loss evaluators")
    ssub = sp.add_subparsers(dest="loss", required=True, parser_class=_Parser)
    p = ssub.add_parser("down4")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_srloss_down4)
    p = ssub.add_parser("adv")
    p.add_argument("--dreal", required=True)
    p.add_argument("--dfake", required=True)
    p.set_defaults(func=cmd_srloss_adv)
    p = ssub.add_parser("feat")
    p.add_argument("--hr", required=True)
    p.add_argument("--sr", required=True)
    p.add_argument("--extractor", choices=("identity", "conv"), default="identity")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--depth", type=int, default=2)
    p.set_defaults(func=cmd_srloss_feat)
    p = ssub.add_parser("cv")
    p.add_argument("--hr", required=True)
    p.add_argument("--sr", required=True)
    p.add_argument("--ref", required=True)
    _add_reg_flags(p)
    p.set_defaults(func=cmd_srloss_cv)

    qp = sub.add_parser("quality", help="ordered-attribute scoring and meta-task tools")
    qsub = qp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = qsub.add_parser("eval")
    p.add_argument("--matrix", required=True)
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_quality_eval)
    p = qsub.add_parser("select")
    p.add_argument("--tasks", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_quality_select)
    p = qsub.add_parser("fit")
    p.add_argument("--tasks", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.set_defaults(func=cmd_quality_fit)

    p = sub.add_parser("coupled", help="produce / evaluate / penalise loop")
    p.add_argument("--input", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--max-iters", type=int, default=5)
    p.add_argument("--psnr-min", type=float, default=30.0)
    p.add_argument("--ssim-min", type=float, default=0.9)
    p.add_argument("--penalty", type=float, default=0.5)
    p.add_argument("--producer", choices=("noise", "identity"), default="noise")
    p.add_argument("--amplitude", type=float, default=16.0,
                   help="initial checkerboard noise amplitude for the noise producer")
    p.set_defaults(func=cmd_coupled)
    return parser


def run_command(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
        report = args.func(args)
    except (UsageError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    sys.stdout.write(report.serialize())
    if report.status == REJECTED:
        return EXIT_REJECTED
    return EXIT_OK if report.status == ACCEPTED else EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


def entry() -> None:
    sys.exit(main())
