"""Acceptance suite: one check per criterion, one PASS/FAIL line each.

Run under pytest (``pytest tests/test_acceptance.py -s``) or directly
(``python tests/test_acceptance.py``). Each criterion function returns a
list of ``(description, ok)`` pairs; the criterion passes when all hold.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cli_fixtures import CASES, GOLDEN_DIR, transcript, write_inputs  # noqa: E402
from geomine.coupled import (  # noqa: E402
    ACCEPTED,
    REJECTED,
    CoupledConfig,
    checkerboard_noise_producer,
    coupled_run,
    identity_producer,
)
from geomine.geometry import curl, jacobian_determinant  # noqa: E402
from geomine.imgcore import (  # noqa: E402
    Image,
    VectorField,
    decode_field,
    decode_image,
    encode_field,
    encode_image,
)
from geomine.metrics import (  # noqa: E402
    AnnotationError,
    BoundingBox,
    ConfusionCounts,
    Detection,
    DetectionParseError,
    GroundTruth,
    classification_rates,
    evaluate_detections,
    image_quality,
    parse_detections_csv,
    parse_label_csv,
    parse_manifest,
    parse_voc_xml,
    rtp,
)
from geomine.quality import (  # noqa: E402
    EvalMatrix,
    MetaTask,
    QualityError,
    RegressionModel,
    joint_gradient_fit,
    ordered_attribute_eval,
    parse_matrix_csv,
    parse_tasks_csv,
    parse_vector_csv,
    select_meta_tasks,
    task_gradient,
    task_loss,
)
from geomine.registration import energy_gradient, register, register_with_trace  # noqa: E402
from geomine.srloss import (  # noqa: E402
    IdentityExtractor,
    adversarial_objective,
    cv_loss,
    downsample4x,
    feature_loss,
)
from oracles import (  # noqa: E402
    best_integer_shift,
    brute_force_ap,
    central_difference_gradient,
    loop_energy,
    square_image,
)


def linear_field(n, fx, fy):
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    return VectorField(np.stack([fx(xs, ys), fy(xs, ys)], axis=-1))


def inner(a):
    return a[1:-1, 1:-1]


def criterion_1():
    n = 128
    t0 = time.perf_counter()
    zero = VectorField.zeros(n, n)
    jd0, c0 = jacobian_determinant(zero).data, curl(zero).data
    jd_lin = jacobian_determinant(linear_field(n, lambda x, y: 0.1 * x, lambda x, y: 0.2 * y)).data
    c_rot = curl(linear_field(n, lambda x, y: -0.5 * y, lambda x, y: 0.5 * x)).data
    # phi = 0.3 x^2 - 0.7 xy + 0.2 y^2 + x
    c_grad = curl(linear_field(n, lambda x, y: 0.6 * x - 0.7 * y + 1, lambda x, y: -0.7 * x + 0.4 * y)).data
    elapsed = time.perf_counter() - t0
    return [
        ("zero field: JD == 1 and curl == 0 on the interior",
         bool(np.all(inner(jd0) == 1.0) and np.all(inner(c0) == 0.0))),
        ("u=(0.1x, 0.2y): JD = 1.32 +- 1e-6", bool(np.max(np.abs(inner(jd_lin) - 1.32)) <= 1e-6)),
        ("u=(-0.5y, 0.5x): curl = 1 +- 1e-6", bool(np.max(np.abs(inner(c_rot) - 1.0)) <= 1e-6)),
        ("curl of a quadratic potential's gradient = 0 +- 1e-6", bool(np.max(np.abs(inner(c_grad))) <= 1e-6)),
        (f"runtime {elapsed:.3f}s < 1s on 128x128", elapsed < 1.0),
    ]


def criterion_2():
    fixed, moving = square_image(20, 20), square_image(24, 20)
    oracle = best_integer_shift(fixed, moving)
    t0 = time.perf_counter()
    res = register_with_trace(Image(fixed), Image(moving))
    same = register(Image(fixed), Image(fixed))
    elapsed = time.perf_counter() - t0
    u = res.field.data[20:36, 20:36]
    mdx, mdy = float(u[..., 0].mean()), float(u[..., 1].mean())
    monotone = all(all(b <= a for a, b in zip(t.energies, t.energies[1:])) for t in res.levels)
    return [
        (f"mean displacement ({mdx:.3f}, {mdy:.3f}) within 0.5 px of oracle {oracle}",
         abs(mdx - oracle[0]) <= 0.5 and abs(mdy - oracle[1]) <= 0.5),
        ("energy trace non-increasing on every level", monotone),
        ("register(I, I) max displacement <= 0.05", float(np.max(np.abs(same.data))) <= 0.05),
        (f"runtime {elapsed:.2f}s < 30s", elapsed < 30.0),
    ]


def criterion_3():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        f, m = rng.random((8, 8)), rng.random((8, 8))
        u = rng.uniform(0.05, 0.45, (8, 8, 2)) * rng.choice([-1.0, 1.0], (8, 8, 2))
        _, g = energy_gradient(f, m, u, 1.0)
        fd = central_difference_gradient(lambda v: loop_energy(f, m, v, 1.0), u)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    return [(f"worst relative error over 20 seeds {worst:.2e} <= 1e-3", worst <= 1e-3)]


def criterion_4():
    rng = np.random.default_rng(2024)
    psnr_ok = ssim_ok = mse_ok = True
    for _ in range(200):
        h, w = rng.integers(2, 24, 2)
        x = Image(rng.integers(0, 256, (h, w)).astype(float))
        y = Image(rng.integers(0, 256, (h, w)).astype(float))
        q = image_quality(x, y)
        ref_mse = math.fsum(((x.data - y.data) ** 2).ravel()) / x.data.size
        mse_ok &= math.isclose(q.mse, ref_mse, rel_tol=1e-12)
        if q.mse > 0:
            psnr_ok &= q.psnr == 10 * math.log10(255**2 / q.mse)
        ssim_ok &= image_quality(x, x).ssim == 1.0 and image_quality(y, x).ssim == q.ssim
    rates_ok = True
    for _ in range(200):
        r = classification_rates(ConfusionCounts(*(int(v) for v in rng.integers(0, 20, 4))))
        rates_ok &= all(v is None or 0.0 <= v <= 1.0 for v in r)
    black, white = Image(np.zeros((8, 8))), Image(np.full((8, 8), 255.0))
    spot = image_quality(black, white)
    return [
        ("mse matches an fsum oracle on 200 pairs", bool(mse_ok)),
        ("psnr = 10 log10(MAX^2 / mse) exactly", bool(psnr_ok)),
        ("ssim(x, x) = 1 and ssim symmetric", bool(ssim_ok)),
        ("all rates in [0, 1] or undefined", bool(rates_ok)),
        ("black vs white: mse 65025, psnr 0 dB", spot.mse == 65025.0 and spot.psnr == 0.0),
    ]


def random_detection_instance(rng):
    def box():
        x0, y0 = rng.integers(0, 13, 2)
        bw, bh = rng.integers(1, 9, 2)
        return (float(x0), float(y0), float(x0 + bw), float(y0 + bh))

    images, labels = ["i0", "i1"], ["a", "b"]
    scores = [0.1, 0.3, 0.5, 0.5, 0.7, 0.9, 1.0]
    gts = [(images[rng.integers(2)], labels[rng.integers(2)], box()) for _ in range(rng.integers(0, 4))]
    dets = [(images[rng.integers(2)], labels[rng.integers(2)], scores[rng.integers(len(scores))], box())
            for _ in range(rng.integers(0, 6))]
    return dets, gts


def as_objects(dets, gts, transform=lambda s: s):
    return ([Detection(i, lab, transform(s), BoundingBox(*b)) for i, lab, s, b in dets],
            [GroundTruth(i, lab, BoundingBox(*b)) for i, lab, b in gts])


def criterion_5():
    rng = np.random.default_rng(55)
    worst, invariant = 0.0, True
    for k in range(500):
        dets, gts = random_detection_instance(rng)
        thresh = (0.3, 0.5, 0.7)[k % 3]
        ev = evaluate_detections(*as_objects(dets, gts), thresh)
        for label, ap in ev.ap.items():
            worst = max(worst, abs(ap - brute_force_ap(dets, gts, label, thresh)))
        moved = evaluate_detections(*as_objects(dets, gts, lambda s: s**3), thresh)
        invariant &= moved.ap == ev.ap
    return [
        (f"max |AP - brute force| over 500 instances {worst:.1e} <= 1e-12", worst <= 1e-12),
        ("AP unchanged under s -> s^3", bool(invariant)),
    ]


def criterion_6():
    base = ["benign", "malignant", "none", "benign", "benign",
            "malignant", "none", "benign", "none", "malignant"]
    other, third = list(base), list(base)
    other[7], other[8] = "malignant", "benign"
    third[9] = "none"
    rng = np.random.default_rng(6)
    labels = np.array(["benign", "malignant", "none"])
    monotone = True
    for _ in range(100):
        n_models, n_images = rng.integers(2, 5), rng.integers(1, 13)
        panel = [list(labels[rng.integers(0, 3, n_images)]) for _ in range(n_models)]
        extra = list(labels[rng.integers(0, 3, n_images)])
        monotone &= rtp(panel + [extra]) <= rtp(panel)
    return [
        ("unanimous panel -> 1.0", rtp([base, base, base]) == 1.0),
        ("7-of-10 consensus fixture -> 0.7", rtp([base, other, third]) == 0.7),
        ("adding a model never raises RTP (100 panels)", bool(monotone)),
    ]


def criterion_7():
    rng = np.random.default_rng(7)
    equal = True
    for _ in range(100):
        h, w = rng.integers(1, 20, 2)
        hr, sr = Image(rng.uniform(0, 255, (h, w))), Image(rng.uniform(0, 255, (h, w)))
        equal &= feature_loss(hr, sr, IdentityExtractor()) == image_quality(hr, sr).mse
    hr = Image(square_image(20, 20, n=32, side=10))
    ref = Image(square_image(22, 21, n=32, side=10))
    mean_ok = True
    for _ in range(50):
        data = rng.integers(0, 256, (4 * rng.integers(1, 6), 4 * rng.integers(1, 6))).astype(float)
        out = downsample4x(Image(data)).data
        mean_ok &= math.fsum(out.ravel()) / out.size == math.fsum(data.ravel()) / data.size
    return [
        ("identity-extractor feature loss == MSE on 100 pairs", bool(equal)),
        ("adversarial objective at (0.5, 0.5) = -1.386294 +- 1e-6",
         abs(adversarial_objective([0.5], [0.5]) + 1.386294) <= 1e-6),
        ("cv_loss(hr, hr, ref) == 0", cv_loss(hr, hr, ref) == 0.0),
        ("downsample4x preserves mean intensity exactly", bool(mean_ok)),
    ]


def criterion_8():
    rng = np.random.default_rng(8)
    p = rng.uniform(0, 1, 5)
    ident = ordered_attribute_eval(EvalMatrix(np.eye(5), p))
    worked = ordered_attribute_eval(EvalMatrix([[0.5, 0.5], [0.2, 0.8]], [0.4, 0.6]))
    linear = True
    for _ in range(100):
        k = int(rng.integers(1, 7))
        d, p1, p2 = rng.normal(size=(k, k)), rng.normal(size=k), rng.normal(size=k)
        a, b = rng.normal(size=2)
        lhs = ordered_attribute_eval(EvalMatrix(d, a * p1 + b * p2))
        rhs = a * ordered_attribute_eval(EvalMatrix(d, p1)) + b * ordered_attribute_eval(EvalMatrix(d, p2))
        linear &= bool(np.allclose(lhs, rhs, rtol=0, atol=1e-10))
    return [
        ("identity matrix returns p verbatim", bool(np.array_equal(ident, p))),
        ("worked 2x2 case = (0.5, 0.56) +- 1e-12", bool(np.max(np.abs(worked - [0.5, 0.56])) <= 1e-12)),
        ("linear in p on 100 random instances", linear),
    ]


def task_with_gradient(tid, gw, gb):
    r1, r2 = (gw + gb) / 2, (gb - gw) / 2
    return MetaTask(tid, [[1.0], [-1.0]], [-r1, -r2])


def criterion_9():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        t = MetaTask("t", rng.normal(size=(n, m)), rng.normal(size=n))
        params = rng.normal(size=m + 1)
        g = task_gradient(t, RegressionModel(params[:-1], params[-1]))
        fd = central_difference_gradient(lambda v: task_loss(t, RegressionModel(v[:-1], v[-1])), params)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    gaps = []
    for _ in range(10):
        x, y = rng.uniform(-1, 1, (3, 1)), rng.normal(size=3)
        xa = np.hstack([x, np.ones((3, 1))])
        opt = np.linalg.lstsq(xa, y, rcond=None)[0]
        opt_mse = float(np.mean((xa @ opt - y) ** 2))
        lr = 1.0 / float(np.max(np.linalg.eigvalsh(2 / 3 * xa.T @ xa)))
        res = joint_gradient_fit([MetaTask("t", x, y)], steps=20000, lr=lr)
        gaps.append(abs(res.losses[-1] - opt_mse))
    invariant = True
    model = RegressionModel.zeros(1)
    for _ in range(50):
        grads = rng.normal(size=(6, 2))
        scales = rng.uniform(0.1, 10, 6)
        tasks = [task_with_gradient(f"t{i}", *g) for i, g in enumerate(grads)]
        scaled = [task_with_gradient(f"t{i}", *(s * g)) for i, (g, s) in enumerate(zip(grads, scales))]
        anchor = task_with_gradient("a", *rng.normal(size=2))
        invariant &= select_meta_tasks(tasks, anchor, model, 6).ids == select_meta_tasks(scaled, anchor, model, 6).ids
    return [
        (f"task gradient vs finite differences, worst rel {worst:.1e} <= 1e-5 (50 tasks)", worst <= 1e-5),
        (f"joint fit reaches least-squares MSE, worst gap {max(gaps):.1e} <= 1e-6", max(gaps) <= 1e-6),
        ("selection order invariant under positive gradient rescaling", bool(invariant)),
    ]


def criterion_10():
    ref = Image(np.random.default_rng(10).uniform(0, 255, (16, 16)))
    ident = coupled_run(ref, identity_producer, ref)
    calls = []

    def counting(img, a):
        calls.append(a)
        return checkerboard_noise_producer(img, a)

    gray = Image(np.full((16, 16), 128.0))
    rejected = coupled_run(gray, counting, gray, CoupledConfig(max_iters=4, ssim_min=1.0), param=8.0)
    # closed form for a +/-a checkerboard on a constant image: mse = a^2,
    # ssim = c2 / (a^2 + c2); walk the halving schedule
    c2 = (0.03 * 255) ** 2
    a, predicted = 32.0, None
    for it in range(1, 7):
        if 10 * math.log10(255**2 / a**2) >= 30 and c2 / (a * a + c2) >= 0.9:
            predicted = it
            break
        a /= 2
    sched = coupled_run(gray, checkerboard_noise_producer, gray, CoupledConfig(max_iters=6), param=32.0)
    return [
        ("identity producer accepted at iteration 1", ident.status == ACCEPTED and ident.iterations == 1),
        ("unattainable threshold rejected after exactly max_iters",
         rejected.status == REJECTED and rejected.iterations == 4 and len(calls) == 4),
        (f"noise schedule accepted at oracle iteration {predicted}",
         sched.status == ACCEPTED and sched.iterations == predicted),
    ]


VALID_DOCS = [
    (parse_voc_xml, b"<annotation><filename>a.png</filename><object><name>benign</name><bndbox>"
                    b"<xmin>1</xmin><ymin>2</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object></annotation>"),
    (parse_detections_csv, b"image_id,label,score,xmin,ymin,xmax,ymax\na.png,benign,0.8,1,2,30,40\n"),
    (parse_label_csv, b"image_id,label\na.png,benign\nb.png,none\n"),
    (parse_manifest, b"split,benign,malignant,normal\ntraining,1870,3160,0\n"),
    (parse_tasks_csv, b"task_id,y,x1,x2\nt1,0.5,1,2\nt1,0.1,0,1\n"),
    (parse_matrix_csv, b"0.5,0.5\n0.2,0.8\n"),
    (parse_vector_csv, b"0.4\n0.6\n"),
]
STRUCTURED = (AnnotationError, DetectionParseError, QualityError)


def mutate(doc: bytes, rng) -> bytes:
    b = bytearray(doc)
    for _ in range(int(rng.integers(1, 6))):
        op = rng.integers(0, 4)
        pos = int(rng.integers(0, len(b) + 1))
        if op == 0 and b:
            b[min(pos, len(b) - 1)] = int(rng.integers(0, 256))
        elif op == 1:
            b[pos:pos] = bytes([int(rng.integers(0, 256))])
        elif op == 2 and b:
            del b[pos:pos + int(rng.integers(1, 8))]
        else:
            b = b[:pos]
    return bytes(b)


def criterion_11():
    rng = np.random.default_rng(11)
    pgm_ok = vf1_ok = True
    for _ in range(100):
        h, w = rng.integers(1, 20, 2)
        maxv = int(rng.choice([255, 1023, 65535]))
        img = Image(rng.integers(0, maxv + 1, (h, w)).astype(float), maxv)
        back = decode_image(encode_image(img))
        pgm_ok &= np.array_equal(back.data, img.data) and back.max_value == maxv
        fld = VectorField(rng.normal(size=(h, w, int(rng.choice([2, 3])))).astype(np.float32))
        enc = encode_field(fld)
        vf1_ok &= np.array_equal(decode_field(enc).data, fld.data) and encode_field(decode_field(enc)) == enc
    crashes = []
    for k in range(10000):
        parser, doc = VALID_DOCS[k % len(VALID_DOCS)]
        raw = mutate(doc, rng)
        try:
            parser(raw)
        except STRUCTURED:
            pass
        except Exception as exc:  # anything else is a crash
            crashes.append((parser.__name__, raw, repr(exc)))
    splits = parse_manifest(b"split,benign,malignant,normal\ntraining,1870,3160,0\nvalidation,195,335,1300\n")
    return [
        ("PGM round-trip bit-exact (100 images)", bool(pgm_ok)),
        ("VF1 round-trip bit-exact (100 fields)", bool(vf1_ok)),
        (f"10000 fuzz cases, {len(crashes)} crashes", not crashes),
        ("manifest: 1870 + 3160 = 5030 training lesions", splits["training"].lesion == 5030),
    ]


def criterion_12():
    mismatched, unstable = [], []
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        write_inputs(root)
        for name, argv in sorted(CASES.items()):
            first = transcript(root, argv)
            if first != (GOLDEN_DIR / f"{name}.txt").read_text():
                mismatched.append(name)
            if transcript(root, argv) != first:
                unstable.append(name)
    return [
        (f"{len(CASES)} subcommand goldens match (mismatched: {mismatched or 'none'})", not mismatched),
        (f"reports byte-identical across runs (unstable: {unstable or 'none'})", not unstable),
    ]


CRITERIA = {
    1: ("geometric analytics", criterion_1),
    2: ("registration recovery", criterion_2),
    3: ("registration gradient check", criterion_3),
    4: ("metric identities", criterion_4),
    5: ("mAP oracle equivalence", criterion_5),
    6: ("RTP", criterion_6),
    7: ("SR losses", criterion_7),
    8: ("ordered attribute evaluation", criterion_8),
    9: ("meta-learning", criterion_9),
    10: ("coupled loop", criterion_10),
    11: ("formats and parsers", criterion_11),
    12: ("end-to-end CLI", criterion_12),
}


def evaluate(number: int) -> tuple[bool, str]:
    name, fn = CRITERIA[number]
    checks = fn()
    ok = all(passed for _, passed in checks)
    failed = [desc for desc, passed in checks if not passed]
    detail = "; ".join(failed) if failed else "; ".join(desc for desc, _ in checks)
    return ok, f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}"


@pytest.mark.acceptance
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, capsys):
    ok, line = evaluate(number)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [evaluate(n) for n in sorted(CRITERIA)]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
