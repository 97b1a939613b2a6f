"""Keypoint pipeline over the leveled-ciphertext simulator.

Four stages: difference-of-Gaussians scale space, strict 26-neighbor
extremum detection, subpixel localization, orientation histogram and
descriptor.  In the encrypted modes every interior site of every layer
is processed identically; there is no data-dependent control flow, so
operation counts and traffic shapes depend only on image dimensions and
configuration.

Lane layout: one ciphertext batches all sites of an (octave, layer)
pair, so each comparison template covers every site at once.  Stage
outputs are named graph slots; the client turns resolved slot values
into the keypoint list.  Subpixel division, the orientation argmax (in
deferred mode) and descriptor normalization happen client side, since
none of them is expressible in deferred arithmetic.

Mode map: "plaintext" runs the branchy reference implementation on raw
pixels; "interactive" resolves comparisons wave by wave, including a
server-side select tournament for the orientation argmax; "deferred"
ships one package and the client finishes locally, taking the argmax
over the resolved histogram bins.  Both argmax routes resolve ties to
the lowest bin.

Cross-mode agreement is structural, not approximate: every slot the
modes share is rebuilt into its canonical normal form first, so the
server-side ciphertext walk and the client-side residual walk perform
identical float operations in identical order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ckks_sim import CkksContext, SimParams, gather
from .deferred_graph import CipherEvaluator, GraphBuilder, LoweredProgram, lower
from .errors import ConfigError, DeferralUnsupported, DepthExhausted
from .kernels import bin_mask, convolve2d, gaussian_kernel1d, vec_argmax_onehot, weighted_histogram
from .protocol import Client, DecoyPolicy, run_deferred, run_interactive

MARGIN = 5  # descriptor window -4..3 plus the gradient ring
ORIENTATION_RADIUS = 2
DESCRIPTOR_SIGMA = 4.0
NORM_EPS = 1e-12

MAGNITUDE_SQUARED = "magnitude-squared"
SQRT_MAGNITUDE = "sqrt-magnitude"

STAGES = ("scale-space", "detect", "localize", "orient", "descriptor", "protocol")
_GRAPH_STAGES = ("detect", "localize", "orient", "descriptor")


@dataclass(frozen=True)
class PipelineConfig:
    octaves: int = 3
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    orientation_bins: int = 36
    descriptor_grid: tuple[int, int, int] = (4, 4, 8)
    contrast_threshold: float = 0.03
    edge_threshold: float = 10.0
    orientation_weighting: str = MAGNITUDE_SQUARED

    def __post_init__(self):
        if self.octaves < 1 or self.scales_per_octave < 1:
            raise ConfigError("octaves and scales_per_octave must be positive")
        if self.base_sigma <= 0:
            raise ConfigError("base_sigma must be positive")
        if self.orientation_bins < 3:
            raise ConfigError("orientation_bins must be at least 3")
        if tuple(self.descriptor_grid) != (4, 4, 8):
            raise ConfigError("descriptor_grid: only (4, 4, 8) is supported")
        if self.orientation_weighting not in (MAGNITUDE_SQUARED, SQRT_MAGNITUDE):
            raise ConfigError(
                f"unknown orientation_weighting {self.orientation_weighting!r}")

    def sigmas(self) -> list[float]:
        s = self.scales_per_octave
        return [self.base_sigma * 2.0 ** (i / s) for i in range(s + 3)]


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    octave: int
    scale: float
    orientation_bin: int
    descriptor: tuple[float, ...]

    def line(self) -> str:
        head = f"{self.x:.6f} {self.y:.6f} {self.octave} {self.scale:.6f} {self.orientation_bin}"
        return head + " " + " ".join(f"{v:.6f}" for v in self.descriptor)

    def key(self) -> tuple:
        """Identity for cross-run matching: position, scale and bin."""
        return (self.octave, round(self.x, 6), round(self.y, 6),
                round(self.scale, 6), self.orientation_bin)


def parse_keypoint_line(line: str) -> Keypoint:
    parts = line.split()
    if len(parts) < 5:
        raise ValueError(f"keypoint line has {len(parts)} fields, expected at least 5")
    return Keypoint(
        float(parts[0]), float(parts[1]), int(parts[2]), float(parts[3]), int(parts[4]),
        tuple(float(v) for v in parts[5:]),
    )


def keypoints_to_text(kps: list[Keypoint]) -> str:
    return "".join(kp.line() + "\n" for kp in kps)


def keypoints_from_text(text: str) -> list[Keypoint]:
    return [parse_keypoint_line(ln) for ln in text.splitlines() if ln.strip()]


def compare_keypoints(a: list[Keypoint], b: list[Keypoint],
                      descriptor_tol: float = 1e-9) -> dict:
    """Match two runs by keypoint identity; descriptors compare within tol."""
    bya = {kp.key(): kp for kp in a}
    byb = {kp.key(): kp for kp in b}
    only_a = sorted(k for k in bya if k not in byb)
    only_b = sorted(k for k in byb if k not in bya)
    max_desc = 0.0
    mismatched = []
    for k in bya.keys() & byb.keys():
        da = np.asarray(bya[k].descriptor)
        db = np.asarray(byb[k].descriptor)
        d = float(np.max(np.abs(da - db))) if da.size else 0.0
        max_desc = max(max_desc, d)
        if d > descriptor_tol:
            mismatched.append(k)
    return {
        "matched": len(bya.keys() & byb.keys()),
        "only_a": only_a,
        "only_b": only_b,
        "descriptor_mismatches": sorted(mismatched),
        "max_descriptor_diff": max_desc,
        "equal": not only_a and not only_b and not mismatched,
    }


@dataclass
class RunReport:
    mode: str
    image_shape: tuple[int, int]
    seed: int
    depth_budget: int
    keypoint_count: int = 0
    dependency_depth: int = 0
    rounds: list = field(default_factory=list)
    stage_ops: dict = field(default_factory=dict)
    stage_min_level: dict = field(default_factory=dict)
    server_decrypt_calls: int = 0
    client_decrypt_calls: int = 0
    leakage: dict | None = None
    package_bytes: int | None = None
    oracle_diff: dict | None = None


@dataclass
class PipelineResult:
    keypoints: list[Keypoint]
    report: RunReport
    slots: dict | None = None


def validate_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ConfigError("image must be a non-empty 2-D array")
    if not np.all(np.isfinite(img)):
        raise ConfigError("image contains non-finite values")
    return img


def _interior(dim: int) -> np.ndarray:
    return np.arange(MARGIN, dim - MARGIN)


def _site_grid(h: int, w: int):
    iy, ix = _interior(h), _interior(w)
    if len(iy) == 0 or len(ix) == 0:
        return None
    ys, xs = np.meshgrid(iy, ix, indexing="ij")
    return ys.ravel(), xs.ravel()


# -- encrypted scale space ---------------------------------------------------------


def _scale_space_cipher(ctx: CkksContext, img_ct, cfg: PipelineConfig):
    """Gaussian and DoG pyramids of batched per-pixel ciphertexts.

    Every blur runs directly from the octave base (two separable passes,
    two plaintext levels), so level consumption per octave is flat in
    the number of scales.  The input counts as already carrying the
    base blur.
    """
    sigmas = cfg.sigmas()
    s = cfg.scales_per_octave
    gauss, dog, dims = [], [], []
    base = img_ct
    for o in range(cfg.octaves):
        h, w = np.asarray(base.value).shape
        dims.append((h, w))
        levels = [base]
        for i in range(1, s + 3):
            srel = math.sqrt(sigmas[i] * sigmas[i] - sigmas[0] * sigmas[0])
            k = gaussian_kernel1d(srel)
            g = convolve2d(ctx, convolve2d(ctx, base, k.reshape(-1, 1)), k.reshape(1, -1))
            levels.append(g)
        gauss.append(levels)
        dog.append([ctx.sub(levels[j + 1], levels[j]) for j in range(s + 2)])
        base = gather(levels[s], np.ix_(np.arange(0, h, 2), np.arange(0, w, 2)))
    return gauss, dog, dims


# -- graph construction ------------------------------------------------------------


_NEIGHBORS_26 = [
    (dl, dy, dx)
    for dl in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dx in (-1, 0, 1)
    if (dl, dy, dx) != (0, 0, 0)
]


class _GraphPlan:
    """Everything the run phase needs to know about the built graph."""

    def __init__(self, builder: GraphBuilder):
        self.builder = builder
        self.slots: dict = {}
        self.nf_slots: set[str] = set()
        self.stage_slots: dict[str, list[str]] = {st: [] for st in _GRAPH_STAGES}
        self.stage_cmps: dict[str, list[int]] = {st: [] for st in _GRAPH_STAGES}
        self.stage_sqrts: dict[str, list[int]] = {st: [] for st in _GRAPH_STAGES}
        self.stage_exprs: dict[str, list] = {st: [] for st in _GRAPH_STAGES}
        self.sites: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def add_slot(self, stage: str, name: str, e, nf: bool = True):
        self.slots[name] = e
        self.stage_slots[stage].append(name)
        if nf:
            self.nf_slots.add(name)

    def mark_stage(self, stage: str, cmp_lo: int, sqrt_lo: int):
        b = self.builder
        self.stage_cmps[stage].extend(range(cmp_lo, len(b.comparisons)))
        self.stage_sqrts[stage].extend(range(sqrt_lo, len(b.sqrts)))


class _OpBracket:
    """Attributes simulator op-count deltas to a named stage."""

    def __init__(self, ctx: CkksContext, report: RunReport, stage: str):
        self.ctx, self.report, self.stage = ctx, report, stage

    def __enter__(self):
        self.before = self.ctx.snapshot_counts()
        return self

    def __exit__(self, *exc):
        after = self.ctx.snapshot_counts()
        acc = self.report.stage_ops.setdefault(self.stage, {})
        for k, n in after.items():
            d = n - self.before.get(k, 0)
            if d:
                acc[k] = acc.get(k, 0) + d
        return False


def _or(b: GraphBuilder, p, q):
    return b.sub(b.add(p, q), b.mul(p, q))


def _build_site_graph(ctx, plan: _GraphPlan, gauss, dog, dims, cfg: PipelineConfig,
                      with_argmax: bool, report: RunReport):
    b = plan.builder
    s = cfg.scales_per_octave
    sigmas = cfg.sigmas()
    t = cfg.contrast_threshold
    r = cfg.edge_threshold
    nb = cfg.orientation_bins

    for o in range(cfg.octaves):
        grid = _site_grid(*dims[o])
        if grid is None:
            continue
        ys, xs = grid
        for l in range(1, s + 1):
            plan.sites[(o, l)] = (ys, xs)
            p = f"o{o}l{l}"

            dcache: dict = {}

            def dleaf(dl, dy, dx):
                key = (dl, dy, dx)
                if key not in dcache:
                    ct = gather(dog[o][l + dl], (ys + dy, xs + dx))
                    dcache[key] = b.cipher(ct, name=f"{p}d{dl:+d}{dy:+d}{dx:+d}")
                return dcache[key]

            # detect: strict max or strict min among the 26 neighbors,
            # plus |v| above the contrast threshold.
            cmp_lo, sqrt_lo = len(b.comparisons), len(b.sqrts)
            v = dleaf(0, 0, 0)
            neighbors = [dleaf(dl, dy, dx) for dl, dy, dx in _NEIGHBORS_26]
            is_max = b.product([b.compare(v, n) for n in neighbors])
            # strict minimum via negated operands; the naive reversed
            # compare would canonicalize into a non-strict complement
            is_min = b.product([b.compare(b.neg(v), b.neg(n)) for n in neighbors])
            contrast = _or(b, b.compare(v, b.plain(t)), b.compare(b.plain(-t), v))
            det_mask = b.mul(_or(b, is_max, is_min), contrast)
            plan.mark_stage("detect", cmp_lo, sqrt_lo)

            # localize: central differences, adjugate solve, acceptance
            # and edge tests in cleared (division-free) form.
            cmp_lo, sqrt_lo = len(b.comparisons), len(b.sqrts)
            d0 = {(dy, dx): dleaf(0, dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}
            half, quarter = b.plain(0.5), b.plain(0.25)
            gx = b.mul(half, b.sub(d0[(0, 1)], d0[(0, -1)]))
            gy = b.mul(half, b.sub(d0[(1, 0)], d0[(-1, 0)]))
            gs = b.mul(half, b.sub(dleaf(1, 0, 0), dleaf(-1, 0, 0)))
            v2 = b.add(v, v)
            dxx = b.sub(b.add(d0[(0, 1)], d0[(0, -1)]), v2)
            dyy = b.sub(b.add(d0[(1, 0)], d0[(-1, 0)]), v2)
            dss = b.sub(b.add(dleaf(1, 0, 0), dleaf(-1, 0, 0)), v2)
            dxy = b.mul(quarter, b.sub(b.sub(d0[(1, 1)], d0[(1, -1)]),
                                       b.sub(d0[(-1, 1)], d0[(-1, -1)])))
            dxs = b.mul(quarter, b.sub(b.sub(dleaf(1, 0, 1), dleaf(1, 0, -1)),
                                       b.sub(dleaf(-1, 0, 1), dleaf(-1, 0, -1))))
            dys = b.mul(quarter, b.sub(b.sub(dleaf(1, 1, 0), dleaf(1, -1, 0)),
                                       b.sub(dleaf(-1, 1, 0), dleaf(-1, -1, 0))))
            a00 = b.sub(b.mul(dyy, dss), b.mul(dys, dys))
            a01 = b.sub(b.mul(dxs, dys), b.mul(dxy, dss))
            a02 = b.sub(b.mul(dxy, dys), b.mul(dyy, dxs))
            a11 = b.sub(b.mul(dxx, dss), b.mul(dxs, dxs))
            a12 = b.sub(b.mul(dxy, dxs), b.mul(dxx, dys))
            a22 = b.sub(b.mul(dxx, dyy), b.mul(dxy, dxy))
            det = b.add(b.add(b.mul(dxx, a00), b.mul(dxy, a01)), b.mul(dxs, a02))
            num_x = b.neg(b.add(b.add(b.mul(a00, gx), b.mul(a01, gy)), b.mul(a02, gs)))
            num_y = b.neg(b.add(b.add(b.mul(a01, gx), b.mul(a11, gy)), b.mul(a12, gs)))
            num_s = b.neg(b.add(b.add(b.mul(a02, gx), b.mul(a12, gy)), b.mul(a22, gs)))
            accept = b.rational_div(num_x, det).abs_le(0.5)
            accept = b.mul(accept, b.rational_div(num_y, det).abs_le(0.5))
            accept = b.mul(accept, b.rational_div(num_s, det).abs_le(0.5))
            tr = b.add(dxx, dyy)
            det2 = b.sub(b.mul(dxx, dyy), b.mul(dxy, dxy))
            # tr^2 <= r*det2 rejects det2 <= 0 on its own; no sign split
            edge_ok = b.sub(b.plain(1.0), b.compare(b.mul(tr, tr), b.mul(b.plain(r), det2)))
            kp_mask = b.mul(b.mul(det_mask, accept), edge_ok)
            plan.mark_stage("localize", cmp_lo, sqrt_lo)
            plan.add_slot("localize", f"{p}/mask", b.simplify(kp_mask))
            plan.add_slot("localize", f"{p}/det", b.simplify(det))
            plan.add_slot("localize", f"{p}/num_x", b.simplify(num_x))
            plan.add_slot("localize", f"{p}/num_y", b.simplify(num_y))
            plan.add_slot("localize", f"{p}/num_s", b.simplify(num_s))

            # gradients of the Gaussian level, shared by orientation and
            # descriptor.  The 1/2 central-difference factor is folded
            # into the plaintext weights; angles do not see scale.
            g_lvl = gauss[o][l]
            grads = {}
            with _OpBracket(ctx, report, "orient"):
                for vv in range(-4, 4):
                    for uu in range(-4, 4):
                        gxr = ctx.sub(gather(g_lvl, (ys + vv, xs + uu + 1)),
                                      gather(g_lvl, (ys + vv, xs + uu - 1)))
                        gyr = ctx.sub(gather(g_lvl, (ys + vv + 1, xs + uu)),
                                      gather(g_lvl, (ys + vv - 1, xs + uu)))
                        grads[(uu, vv)] = (
                            b.cipher(gxr, name=f"{p}gx{uu:+d}{vv:+d}"),
                            b.cipher(gyr, name=f"{p}gy{uu:+d}{vv:+d}"),
                        )

            # orientation histogram over the inner window
            cmp_lo, sqrt_lo = len(b.comparisons), len(b.sqrts)
            sw = 1.5 * sigmas[l]
            rad = ORIENTATION_RADIUS
            triples = []
            for vv in range(-rad, rad + 1):
                for uu in range(-rad, rad + 1):
                    dx_e, dy_e = grads[(uu, vv)]
                    gwin = math.exp(-(uu * uu + vv * vv) / (2.0 * sw * sw))
                    mag2 = b.add(b.mul(dx_e, dx_e), b.mul(dy_e, dy_e))
                    if cfg.orientation_weighting == MAGNITUDE_SQUARED:
                        w = b.mul(mag2, b.plain(0.25 * gwin))
                    else:
                        w = b.mul(b.sqrt_deferred(mag2), b.plain(0.5 * gwin))
                    triples.append((dx_e, dy_e, w))
            bins = [b.simplify(e) for e in weighted_histogram(b, triples, nb)]
            wsum = b.simplify(b.sum_([w for _, _, w in triples]))
            plan.mark_stage("orient", cmp_lo, sqrt_lo)
            plan.add_slot("orient", f"{p}/wsum", wsum)
            if with_argmax:
                plan.stage_exprs["orient"].extend(bins)
                onehot = vec_argmax_onehot(b, bins)
                for k in range(nb):
                    plan.add_slot("orient", f"{p}/oh{k:02d}", onehot[k], nf=False)
            else:
                for k in range(nb):
                    plan.add_slot("orient", f"{p}/bin{k:02d}", bins[k])

            # descriptor: 4x4 cells of 2x2 pixels, 8 angle bins, fixed
            # Gaussian weight, nearest-cell assignment
            cmp_lo, sqrt_lo = len(b.comparisons), len(b.sqrts)
            entries: list = [None] * 128
            for vv in range(-4, 4):
                for uu in range(-4, 4):
                    dx_e, dy_e = grads[(uu, vv)]
                    cu, cv = (uu + 4) // 2, (vv + 4) // 2
                    gwin = math.exp(
                        -(uu * uu + vv * vv) / (2.0 * DESCRIPTOR_SIGMA * DESCRIPTOR_SIGMA))
                    mag2 = b.add(b.mul(dx_e, dx_e), b.mul(dy_e, dy_e))
                    w = b.mul(mag2, b.plain(0.25 * gwin))
                    masks = bin_mask(b, dx_e, dy_e, 8)
                    for k in range(8):
                        e = (cv * 4 + cu) * 8 + k
                        term = b.mul(masks[k], w)
                        entries[e] = term if entries[e] is None else b.add(entries[e], term)
            for e in range(128):
                plan.add_slot("descriptor", f"{p}/d{e:03d}", b.simplify(entries[e]))
            plan.mark_stage("descriptor", cmp_lo, sqrt_lo)


# -- assembly ----------------------------------------------------------------------


def _assemble(plan: _GraphPlan, values: dict, cfg: PipelineConfig,
              orientation_from: str) -> list[Keypoint]:
    """Turn resolved slot lanes into the keypoint list (client side)."""
    kps = []
    nb = cfg.orientation_bins
    for (o, l), (ys, xs) in sorted(plan.sites.items()):
        p = f"o{o}l{l}"
        mask = np.asarray(values[f"{p}/mask"])
        # exact runs give literal 0.0/1.0; under injected noise the product
        # of boolean factors only drifts by the noise bound, so 0.5 splits
        hot = np.nonzero(mask > 0.5)[0]
        if len(hot) == 0:
            continue
        det = np.asarray(values[f"{p}/det"])
        nums = [np.asarray(values[f"{p}/num_{ax}"]) for ax in ("x", "y", "s")]
        prefix = "oh" if orientation_from == "onehot" else "bin"
        stack = np.stack([values[f"{p}/{prefix}{k:02d}"] for k in range(nb)])
        obins = np.argmax(stack, axis=0)
        desc = np.stack([values[f"{p}/d{e:03d}"] for e in range(128)])
        scale_factor = float(1 << o)
        for i in hot:
            d = float(det[i])
            if d != 0.0:
                off = [float(n[i]) / d for n in nums]
            else:
                off = [0.0, 0.0, 0.0]
            vec = desc[:, i].astype(np.float64)
            norm2 = float(np.sum(vec * vec))
            if norm2 >= NORM_EPS:
                vec = vec / math.sqrt(norm2) + 0.0  # adding 0 drops negative zeros
            else:
                vec = np.zeros(128)
            kps.append(Keypoint(
                x=(float(xs[i]) + off[0]) * scale_factor,
                y=(float(ys[i]) + off[1]) * scale_factor,
                octave=o,
                scale=float(l) + off[2],
                orientation_bin=int(obins[i]),
                descriptor=tuple(float(c) for c in vec),
            ))
    kps.sort(key=lambda k: (k.octave, k.scale, k.y, k.x))
    return kps


# -- run ---------------------------------------------------------------------------


def _note_level(report: RunReport, stage: str, cts):
    levels = [ct.level for ct in cts]
    if not levels:
        return
    low = min(levels)
    cur = report.stage_min_level.get(stage)
    report.stage_min_level[stage] = low if cur is None else min(cur, low)


def run_pipeline(img, cfg: PipelineConfig | None = None, sim: SimParams | None = None,
                 mode: str = "plaintext", seed: int = 0,
                 keep_slots: bool = False) -> PipelineResult:
    cfg = cfg if cfg is not None else PipelineConfig()
    sim = sim if sim is not None else SimParams()
    img = validate_image(img)

    if mode in ("plaintext", "plaintext-oracle"):
        from . import oracle

        kps = oracle.run_reference(img, cfg)
        report = RunReport("plaintext", img.shape, seed, sim.depth_budget,
                           keypoint_count=len(kps))
        return PipelineResult(kps, report)
    if mode not in ("interactive", "deferred"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "deferred" and cfg.orientation_weighting == SQRT_MAGNITUDE:
        raise DeferralUnsupported(
            "sqrt-magnitude orientation weighting resolves square roots "
            "mid-histogram; run it interactively")

    ctx = CkksContext(sim, seed=seed)
    client = Client(ctx)
    report = RunReport(mode, img.shape, seed, sim.depth_budget)

    with _OpBracket(ctx, report, "scale-space"):
        img_ct = ctx.encrypt(img)
        try:
            gauss, dog, dims = _scale_space_cipher(ctx, img_ct, cfg)
        except DepthExhausted as e:
            raise DepthExhausted(str(e), stage="scale-space") from e
    _note_level(report, "scale-space",
                [g for lv in gauss for g in lv] + [d for lv in dog for d in lv])

    plan = _GraphPlan(GraphBuilder())
    _build_site_graph(ctx, plan, gauss, dog, dims, cfg,
                      with_argmax=(mode == "interactive"), report=report)
    report.dependency_depth = plan.builder.dependency_depth(plan.slots.values())

    if mode == "deferred":
        program = _lower_by_stage(ctx, plan, report)
        with _OpBracket(ctx, report, "protocol"):
            run = run_deferred(ctx, plan.builder, plan.slots, client, DecoyPolicy(),
                               seed=seed, program=program)
        values = {k: np.atleast_1d(np.asarray(v)) for k, v in run.results.items()}
        report.rounds = run.rounds
        report.leakage = run.leakage
        report.package_bytes = run.package_bytes
    else:
        values = _run_interactive_staged(ctx, plan, client, report, seed)

    kps = _assemble(plan, values, cfg,
                    orientation_from=("onehot" if mode == "interactive" else "bins"))
    report.keypoint_count = len(kps)
    report.client_decrypt_calls = client.attributed_decrypts
    report.server_decrypt_calls = client.unattributed_decrypts()
    return PipelineResult(kps, report, slots=values if keep_slots else None)


def _lower_by_stage(ctx, plan: _GraphPlan, report: RunReport) -> LoweredProgram:
    """Lower stage by stage so depth errors name their stage, then merge."""
    b = plan.builder
    ev = CipherEvaluator(ctx, b)
    merged = LoweredProgram([], {}, {}, {},
                            {"bool_params": 0, "sqrt_params": 0, "monomials": 0})
    seen: set[int] = set()
    for stage in _GRAPH_STAGES:
        names = plan.stage_slots[stage]
        if not names:
            continue
        group = {n: plan.slots[n] for n in names}
        try:
            with _OpBracket(ctx, report, stage):
                part = lower(b, group, ctx, evaluator=ev)
        except DepthExhausted as e:
            raise DepthExhausted(str(e), stage=stage) from e
        for cmp in part.comparisons:
            if cmp.id not in seen:
                seen.add(cmp.id)
                merged.comparisons.append(cmp)
        merged.cmp_operands.update(part.cmp_operands)
        merged.sqrt_args.update(part.sqrt_args)
        merged.slots.update(part.slots)
        merged.leakage["monomials"] += part.leakage["monomials"]
        _note_level(report, stage,
                    [ct for rf in part.slots.values() for _, ct in rf.monomials])
        _note_level(report, stage,
                    [ct for pair in part.cmp_operands.values() for ct in pair])
    merged.comparisons.sort(key=lambda c: c.id)
    merged.leakage["bool_params"] = len(merged.cmp_operands)
    merged.leakage["sqrt_params"] = len(merged.sqrt_args)
    # the program tables hold every ciphertext that outlives lowering;
    # dropping the evaluator memo releases all intermediates
    ev.memo.clear()
    return merged


def _run_interactive_staged(ctx, plan: _GraphPlan, client: Client, report: RunReport,
                            seed: int) -> dict:
    """One tier-merged protocol run with per-stage evaluation around it.

    Pure comparison operands, sqrt arguments and residual coefficients
    are evaluated before the protocol, stage by stage, so running out of
    depth is attributed to the stage that caused it; the protocol then
    reuses those ciphertexts through the shared evaluator's memo.
    """
    b = plan.builder
    ev = CipherEvaluator(ctx, b)
    for stage in _GRAPH_STAGES:
        try:
            with _OpBracket(ctx, report, stage):
                seenops = []
                for cid in plan.stage_cmps[stage]:
                    cmp = b.comparisons[cid]
                    for side in (cmp.lhs, cmp.rhs):
                        if side.pure:
                            seenops.append(ev.eval(side))
                for sid in plan.stage_sqrts[stage]:
                    arg = b.sqrts[sid].arg
                    if arg.pure:
                        seenops.append(ev.eval(arg))
                for name in plan.stage_slots[stage]:
                    if name in plan.nf_slots:
                        for coeff in b.normal_form(plan.slots[name]).values():
                            seenops.append(ev.eval(coeff))
                for e in plan.stage_exprs[stage]:
                    for coeff in b.normal_form(e).values():
                        seenops.append(ev.eval(coeff))
                _note_level(report, stage, seenops)
        except DepthExhausted as e:
            raise DepthExhausted(str(e), stage=stage) from e

    try:
        with _OpBracket(ctx, report, "protocol"):
            run = run_interactive(ctx, b, plan.slots, client, DecoyPolicy(), seed=seed,
                                  evaluator=ev, evaluate_slots=False)
    except DepthExhausted as e:
        # everything pure was pre-evaluated; what runs out of depth here
        # is the orientation argmax tournament
        raise DepthExhausted(str(e), stage="orient") from e
    report.rounds = run.rounds

    values: dict = {}
    for stage in _GRAPH_STAGES:
        try:
            with _OpBracket(ctx, report, stage):
                cts = {name: ev.eval(plan.slots[name]) for name in plan.stage_slots[stage]}
                _note_level(report, stage, list(cts.values()))
                for name, ct in cts.items():
                    values[name] = np.atleast_1d(np.asarray(client.decrypt_value(ct)))
        except DepthExhausted as e:
            raise DepthExhausted(str(e), stage=stage) from e
    return values
