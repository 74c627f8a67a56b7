"""Built-in invariant suite: fast, dependency-free diagnostics.

Each check exercises one structural guarantee of the pipeline (gradient
correctness, scan equivalence, shift properties, metric conventions,
determinism) on a small fixed instance.  ``run_selfcheck`` executes the whole
registry and reports per-check pass/fail; the command-line entry point exits
0 only when every check passes.
"""

from __future__ import annotations

import math
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from . import block as ob
from . import pipeline as pl
from . import rangeview as rvw
from . import retrieval as rt
from . import ssm
from . import synthworld as sw
from . import tensor as tt
from . import training as tr
from .io import save_checkpoint, load_checkpoint


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str


def _toy_model() -> Tuple[pl.ModelParams, pl.ModelConfig]:
    cfg = pl.ModelConfig(h=8, w=24, stages=((8, 2, 2), (16, 2, 2), (16, 2, 2)),
                         olm_n=2, vlad_k=4, mlp_hidden=16, out_dim=8)
    return pl.init_model(cfg, seed=42), cfg


def _fd_scalar(op: Callable, arrays: List[np.ndarray], tol: float) -> float:
    """Max relative error between tape gradients and central differences of a
    random scalar projection of ``op``'s output."""
    rng = np.random.default_rng(7)
    proj = None

    def scalar(ts):
        nonlocal proj
        out = op(*ts)
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return tt.tsum(tt.mul(out, tt.Tensor(proj)))

    tensors = [tt.Tensor(a, requires_grad=True) for a in arrays]
    with tt.Tape() as tape:
        loss = scalar(tensors)
    tape.backward(loss)
    worst = 0.0
    h = 1e-6
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        idxs = rng.choice(flat.size, size=min(5, flat.size), replace=False)
        for i in idxs:
            bumped = [x.copy() for x in arrays]
            bumped[k].reshape(-1)[i] += h
            up = float(scalar([tt.Tensor(x) for x in bumped]).data)
            bumped[k].reshape(-1)[i] -= 2 * h
            dn = float(scalar([tt.Tensor(x) for x in bumped]).data)
            numeric = (up - dn) / (2 * h)
            analytic = tensors[k].grad.reshape(-1)[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    if worst >= tol:
        raise AssertionError(f"gradient error {worst:.3e} >= {tol}")
    return worst


def check_autodiff_gradients() -> str:
    rng = np.random.default_rng(42)
    x = rng.standard_normal((2, 6, 4))
    w = rng.standard_normal((4, 4)) * 0.5
    g = rng.standard_normal(4)
    b = rng.standard_normal(4)
    cw = rng.standard_normal((4, 4, 3)) * 0.3

    def op(xt, wt, gt, bt, cwt):
        y = tt.layer_norm(xt, gt, bt)
        y = tt.silu(tt.linear(y, wt))
        y = tt.conv1d_circular(tt.transpose(y, (0, 2, 1)), cwt)
        return tt.softmax(tt.transpose(y, (0, 2, 1)), axis=-1)

    worst = _fd_scalar(op, [x, w, g, b, cw], tol=1e-4)
    return f"max rel err {worst:.2e}"


def check_scan_equivalence() -> str:
    rng = np.random.default_rng(42)
    worst = 0.0
    for m in (1, 7, 64):
        e, n = 3, 4
        delta = tt.Tensor(rng.uniform(1e-3, 1e-1, size=(2, m, e)))
        a = tt.Tensor(-rng.uniform(0.2, 2.0, size=(e, n)))
        b = rng.standard_normal((2, m, n))
        c = rng.standard_normal((2, m, n))
        d = rng.standard_normal(e)
        x = rng.standard_normal((2, m, e))
        dssm = ssm.discretize(delta, a, b, mode="zoh")
        seq = ssm.scan_sequential(dssm, c, d, x).data
        par = ssm.scan_parallel(dssm, c, d, x).data
        worst = max(worst, float(np.max(np.abs(seq - par))))
    if worst >= 1e-10:
        raise AssertionError(f"scan mismatch {worst:.3e} >= 1e-10")
    return f"max |seq - par| {worst:.2e}"


def check_recurrence_convolution_duality() -> str:
    rng = np.random.default_rng(42)
    e, n, m = 3, 4, 32
    delta = tt.Tensor(np.full((1, m, e), 0.05))
    a = tt.Tensor(-rng.uniform(0.2, 2.0, size=(e, n)))
    b = rng.standard_normal(n)
    c = rng.standard_normal(n)
    x = rng.standard_normal((1, m, e))
    dssm = ssm.discretize(delta, a, b, mode="zoh")
    rec = ssm.scan_sequential(dssm, c, np.zeros(e), x).data
    kernel = ssm.lti_kernel(dssm.abar.data[0, 0], dssm.bbar.data[0, 0], c, m)
    conv = ssm.causal_conv(x, kernel)
    worst = float(np.max(np.abs(rec - conv)))
    if worst >= 1e-10:
        raise AssertionError(f"duality mismatch {worst:.3e} >= 1e-10")
    return f"max |rec - conv| {worst:.2e}"


def check_shift_flip_index_identity() -> str:
    rng = np.random.default_rng(42)
    x = tt.Tensor(rng.standard_normal((2, 9, 3)))
    for a in range(9):
        lhs = ob.flip(ob.shift(x, a)).data
        rhs = ob.shift(ob.flip(x), (9 - a) % 9).data
        if not np.array_equal(lhs, rhs):
            raise AssertionError(f"index identity broken at offset {a}")
    return "exact for all offsets"


def check_zero_block_passthrough() -> str:
    cfg = ob.OlmConfig(d=4, n=2)
    params = ob.init_block(np.random.default_rng(42), cfg)
    for value in params.named("olm.L0").values():
        value.data[...] = 0.0
    x = tt.Tensor(np.random.default_rng(7).standard_normal((2, 6, 4)))
    out = ob.olm_forward(x, params, cfg, None)  # eval mode consumes no rng
    if not np.array_equal(out.data, x.data):
        raise AssertionError("zero-weight block is not an exact identity")
    return "bitwise identity"


def check_backbone_shift_equivariance() -> str:
    params, cfg = _toy_model()
    from . import backbone as bb
    bcfg = cfg.backbone_config()
    rng = np.random.default_rng(42)
    x = rng.random((1, 1, cfg.h, cfg.w))
    base = bb.backbone_forward(tt.Tensor(x), params.backbone, bcfg).data
    worst = 0.0
    for s in (1, cfg.w // 4, cfg.w // 2):
        out = bb.backbone_forward(tt.Tensor(np.roll(x, s, axis=3)),
                                  params.backbone, bcfg).data
        worst = max(worst, float(np.max(np.abs(out - np.roll(base, s, axis=1)))))
    if worst >= 1e-12:
        raise AssertionError(f"equivariance error {worst:.3e} >= 1e-12")
    return f"max err {worst:.2e}"


def check_descriptor_shift_invariance() -> str:
    from . import descriptor as gd
    rng = np.random.default_rng(42)
    cfg = gd.VladConfig(d=6, k=4, hidden=16, out=12)
    params = gd.init_gdg(rng, cfg)
    seq = rng.standard_normal((1, 16, 6))
    base = gd.gdg_forward(tt.Tensor(seq), params, cfg).data
    for s in (1, 4, 8):
        out = gd.gdg_forward(tt.Tensor(np.roll(seq, s, axis=1)), params, cfg).data
        if not np.array_equal(out, base):
            raise AssertionError(f"descriptor changed under shift {s}")
    return "bit-exact under shifts"


def _toy_images(cfg: pl.ModelConfig, count: int, seed: int = 42):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        ranges = rng.uniform(1.0, 40.0, size=(cfg.h, cfg.w))
        ranges[rng.random((cfg.h, cfg.w)) < 0.2] = rvw.SENTINEL
        out.append(rvw.RangeImage(ranges=ranges, r_max=50.0))
    return out


def check_bypassed_pipeline_shift_invariance() -> str:
    params, cfg = _toy_model()
    base_img = _toy_images(cfg, 1)[0]
    base = pl.describe_images([base_img], params, cfg, bypass_olm=True)
    worst = 0.0
    for s in (1, cfg.w // 4, cfg.w // 2):
        shifted = rvw.RangeImage(ranges=np.roll(base_img.ranges, s, axis=1),
                                 r_max=base_img.r_max)
        out = pl.describe_images([shifted], params, cfg, bypass_olm=True)
        worst = max(worst, float(np.max(np.abs(out - base))))
    if worst >= 1e-9:
        raise AssertionError(f"invariance error {worst:.3e} >= 1e-9")
    return f"max err {worst:.2e}"


def check_loss_hand_values() -> str:
    def unit(d2, dim=8):
        v = np.zeros(dim)
        v[0] = math.sqrt(d2)
        return tt.Tensor(v)

    q = tt.Tensor(np.zeros(8))
    cfg = tr.LossConfig(alpha=0.25, lam=1e-4, kind="imtrihard")
    loss = tr.imtrihard_loss(q, [unit(1.0), unit(4.0)], [unit(2.0), unit(3.0)], cfg)
    if abs(float(loss.data) - 4.50025) >= 1e-12:
        raise AssertionError(f"hard-mining loss {float(loss.data)!r} != 4.50025")
    tl = tr.triplet_loss(q, [unit(1.0)], [unit(2.0)],
                         tr.LossConfig(alpha=0.25, kind="triplet"),
                         np.random.default_rng(42))
    want = max(1.0 - 2.0 + 0.25, 0.0)
    if abs(float(tl.data) - want) >= 1e-12:
        raise AssertionError(f"paired hinge {float(tl.data)!r} != {want}")
    return "closed-form values match"


def check_hard_mining_brute_force() -> str:
    rng = np.random.default_rng(42)
    for _ in range(20):
        q = rng.standard_normal(6)
        pos = [rng.standard_normal(6) for _ in range(int(rng.integers(1, 6)))]
        neg = [rng.standard_normal(6) for _ in range(int(rng.integers(1, 6)))]
        ip, jn = tr.mine_hardest(q, pos, neg)
        d_p = [np.sum((q - p) ** 2) for p in pos]
        d_n = [np.sum((q - n) ** 2) for n in neg]
        if ip != d_p.index(max(d_p)) or jn != d_n.index(min(d_n)):
            raise AssertionError("mining disagrees with exhaustive search")
    return "20 random sets exact"


def check_metric_hand_values() -> str:
    auc, f1 = rt.pr_metrics([(0.9, True), (0.8, True), (0.2, False), (0.1, False)])
    if auc != 1.0 or f1 != 1.0:
        raise AssertionError(f"perfect separation scored ({auc}, {f1})")
    _, f1 = rt.pr_metrics([(0.9, True), (0.8, False), (0.4, True)])
    if abs(f1 - 0.8) >= 1e-12:
        raise AssertionError(f"three-point F1max {f1!r} != 0.8")
    frac, excluded = rt.recall_at([[3, 1], [2, 9]], [{1}, set()], 1)
    if frac != 0.0 or excluded != 1:
        raise AssertionError("recall cutoff/exclusion convention broken")
    return "conventions match"


def check_search_sort_oracle() -> str:
    rng = np.random.default_rng(42)
    mat = rng.standard_normal((200, 5))
    ids = rng.permutation(1000)[:200].tolist()
    db = rt.DescriptorDb(ids, mat)
    q = rng.standard_normal(5)
    got = rt.db_search(db, q, k=10)
    dists = np.sqrt(np.sum((mat - q) ** 2, axis=1))
    want = [(i, d) for d, i in sorted(zip(dists, ids))[:10]]
    if got != want:
        raise AssertionError("search disagrees with full sort")
    return "top-10 exact"


def check_overlap_identity() -> str:
    spec = sw.WorldSpec(n_places=2, visits_per_place=2, h=8, w=64,
                        place_spacing=120.0)
    world = sw.generate_world(spec)
    cfg = spec.projection_config()
    ri = rvw.build_range_image(world.scans[0], cfg)
    same = rvw.compute_overlap(ri, world.poses[0], world.scans[0], world.poses[0])
    if same != 1.0:
        raise AssertionError(f"self overlap {same} != 1.0")
    revisit = rvw.compute_overlap(ri, world.poses[0], world.scans[2],
                                  world.poses[2])
    if not revisit > 0.3:
        raise AssertionError(f"revisit overlap {revisit} <= 0.3")
    return f"identity 1.0, revisit {revisit:.2f}"


def check_ray_projection_roundtrip() -> str:
    spec = sw.WorldSpec(n_places=2, visits_per_place=1, h=8, w=64,
                        place_spacing=120.0)
    world = sw.generate_world(spec)
    cfg = spec.projection_config()
    scan = world.scans[0]
    u, v, r, valid = rvw.project_points(scan[:, :3], cfg)
    if not valid.all():
        raise AssertionError("a cast point fell outside the image")
    img = rvw.build_range_image(scan, cfg)
    if int(img.valid.sum()) != len(scan):
        raise AssertionError("cast points collided in the image")
    if not np.array_equal(img.ranges[v, u], r):
        raise AssertionError("reprojected ranges differ from cast ranges")
    return f"{len(scan)} points, one pixel each"


def check_descriptor_determinism() -> str:
    params, cfg = _toy_model()
    images = _toy_images(cfg, 3)
    a = pl.describe_images(images, params, cfg)
    b = pl.describe_images(images, params, cfg)
    if not np.array_equal(a, b):
        raise AssertionError("repeated description is not bit-identical")
    return "bit-identical repeats"


def check_checkpoint_roundtrip(tmp_dir: Optional[str] = None) -> str:
    import tempfile
    import os
    params, cfg = _toy_model()
    with tempfile.TemporaryDirectory(dir=tmp_dir) as d:
        path = os.path.join(d, "model.omck")
        save_checkpoint(path, params.named())
        back = load_checkpoint(path)
    named = params.named()
    if set(back) != set(named):
        raise AssertionError("checkpoint name set changed in roundtrip")
    for name, value in named.items():
        want = value.data.astype(np.float32).astype(np.float64)
        if not np.array_equal(back[name], want):
            raise AssertionError(f"checkpoint value drifted for {name}")
    return f"{len(named)} arrays exact"


CHECKS: Tuple[Tuple[str, Callable[[], str]], ...] = (
    ("autodiff_gradients", check_autodiff_gradients),
    ("scan_equivalence", check_scan_equivalence),
    ("recurrence_convolution_duality", check_recurrence_convolution_duality),
    ("shift_flip_index_identity", check_shift_flip_index_identity),
    ("zero_block_passthrough", check_zero_block_passthrough),
    ("backbone_shift_equivariance", check_backbone_shift_equivariance),
    ("descriptor_shift_invariance", check_descriptor_shift_invariance),
    ("bypassed_pipeline_shift_invariance", check_bypassed_pipeline_shift_invariance),
    ("loss_hand_values", check_loss_hand_values),
    ("hard_mining_brute_force", check_hard_mining_brute_force),
    ("metric_hand_values", check_metric_hand_values),
    ("search_sort_oracle", check_search_sort_oracle),
    ("overlap_identity", check_overlap_identity),
    ("ray_projection_roundtrip", check_ray_projection_roundtrip),
    ("descriptor_determinism", check_descriptor_determinism),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
)


def run_selfcheck(log: Optional[Callable[[str], None]] = None) -> List[CheckResult]:
    results = []
    for name, fn in CHECKS:
        try:
            detail = fn() or ""
            results.append(CheckResult(name, True, detail))
        except Exception as exc:  # a failing invariant must not stop the rest
            results.append(CheckResult(name, False, str(exc)))
        if log is not None:
            r = results[-1]
            log(f"{'ok  ' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    return results
