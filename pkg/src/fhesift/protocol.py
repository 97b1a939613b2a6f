"""Comparison delegation between an evaluating server and a key-holding client.

The server evaluates arithmetic under the leveled simulator but cannot
resolve comparisons or square roots.  Two shapes of exchange exist:

  * interactive: unresolved parameters are grouped by dependency tier and
    shipped wave by wave.  The client decrypts the operand pair, answers
    with a freshly encrypted 0/1 (or root) at full depth, and the server
    keeps evaluating.  Rounds equal the comparison dependency depth.
  * deferred: the whole program is lowered to one package of comparison
    operands, sqrt arguments and residual coefficient tables.  One round,
    after which the client finishes the computation locally.

Every batch is padded with decoy records to a power of two (at least 8),
shuffled, and only then given wire ids, so a record's id and position say
nothing about which comparison it belongs to.  Decoy operand values are
resampled from the real operand pool.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .ckks_sim import Ciphertext, CkksContext, SecretKey, Value
from .deferred_graph import (
    CipherEvaluator,
    Comparison,
    Expr,
    GraphBuilder,
    LoweredProgram,
    ResidualFunction,
    SqrtRequest,
    lower,
)

CMP_DTYPE = np.dtype(
    [("id", "<u4"), ("lhs", "<f8"), ("lhs_level", "<u4"), ("rhs", "<f8"), ("rhs_level", "<u4")]
)
RESP_DTYPE = np.dtype([("id", "<u4"), ("value", "<f8"), ("level", "<u4")])
SQRT_DTYPE = RESP_DTYPE

_PKG_MAGIC = b"DCGPKG01"


@dataclass(frozen=True)
class DecoyPolicy:
    """Padding rule for request batches."""

    enabled: bool = True
    min_records: int = 8

    def padded_size(self, n: int) -> int:
        if n == 0 or not self.enabled:
            return n
        target = max(n, self.min_records)
        return 1 << (target - 1).bit_length()


@dataclass
class RoundTrace:
    round: int
    n_real_comparisons: int
    n_real_sqrts: int
    n_wire_comparisons: int
    n_wire_sqrts: int
    request_bytes: int
    response_bytes: int


@dataclass
class ProtocolRun:
    mode: str
    results: dict
    rounds: list[RoundTrace] = field(default_factory=list)
    leakage: dict | None = None
    package_bytes: int | None = None


def _lanes(v: Value, width: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=np.float64), (width,))


class Client:
    """Key holder; resolves comparison and sqrt requests, nothing else.

    Every decrypt the client performs is bracketed into ``attributed_decrypts``
    so a run can prove the server-side remainder is zero.
    """

    def __init__(self, ctx: CkksContext):
        self.ctx = ctx
        self.sk = SecretKey()
        self.attributed_decrypts = 0

    def _decrypt(self, ct: Ciphertext) -> Value:
        self.attributed_decrypts += 1
        return self.sk.decrypt(ct)

    def decrypt_value(self, ct: Ciphertext) -> Value:
        """Final-output decryption, client side."""
        return self._decrypt(ct)

    def unattributed_decrypts(self) -> int:
        return self.sk.decrypt_calls - self.attributed_decrypts

    def resolve_comparisons(self, blob: bytes) -> bytes:
        recs = np.frombuffer(blob, dtype=CMP_DTYPE)
        lhs = self._decrypt(Ciphertext(recs["lhs"].copy(), int(self.ctx.params.depth_budget)))
        rhs = self._decrypt(Ciphertext(recs["rhs"].copy(), int(self.ctx.params.depth_budget)))
        bools = np.greater(lhs, rhs).astype(np.float64)
        out = np.empty(len(recs), dtype=RESP_DTYPE)
        out["id"] = recs["id"]
        out["value"] = self.ctx.encrypt(bools).value
        out["level"] = self.ctx.params.depth_budget
        return out.tobytes()

    def resolve_sqrts(self, blob: bytes) -> bytes:
        recs = np.frombuffer(blob, dtype=SQRT_DTYPE)
        args = self._decrypt(Ciphertext(recs["value"].copy(), int(self.ctx.params.depth_budget)))
        with np.errstate(invalid="ignore"):
            roots = np.sqrt(args)
        out = np.empty(len(recs), dtype=RESP_DTYPE)
        out["id"] = recs["id"]
        out["value"] = self.ctx.encrypt(roots).value
        out["level"] = self.ctx.params.depth_budget
        return out.tobytes()

    def resolve_package(self, blob: bytes) -> dict[str, Value]:
        """Decrypt a deferred package and finish the computation locally."""
        pkg = parse_package(blob)
        cmp_vals = pkg["comparisons"]
        lhs = self._decrypt(Ciphertext(cmp_vals["lhs"].copy(), 0))
        rhs = self._decrypt(Ciphertext(cmp_vals["rhs"].copy(), 0))
        bool_wire = np.greater(lhs, rhs).astype(np.float64)
        sqrt_wire = None
        if len(pkg["sqrts"]):
            args = self._decrypt(Ciphertext(pkg["sqrts"]["value"].copy(), 0))
            with np.errstate(invalid="ignore"):
                sqrt_wire = np.sqrt(args)
        results: dict[str, Value] = {}
        for name, slot in pkg["slots"].items():
            bools = {i: bool_wire[ids] for i, ids in enumerate(slot["bool_ids"])}
            sqrts = {i: sqrt_wire[ids] for i, ids in enumerate(slot["sqrt_ids"])}
            monos = []
            for params, coeff, level in slot["monomials"]:
                monos.append((params, Ciphertext(coeff, int(level))))
            rf = ResidualFunction(
                tuple(range(len(slot["bool_ids"]))),
                tuple(range(len(slot["sqrt_ids"]))),
                tuple(monos),
                slot["width"],
            )
            out = rf.evaluate(bools, sqrts, decrypt=self._decrypt)
            if isinstance(out, np.ndarray) and slot["width"] == 1:
                out = float(out[0])
            results[name] = out
        return results


# -- request batching -------------------------------------------------------------


def _pad_and_shuffle(recs: np.ndarray, policy: DecoyPolicy, rng, operand_fields) -> tuple:
    """Append decoys, shuffle, assign sequential wire ids.

    Returns (wire records, wire ids of the original records in order).
    ``operand_fields`` pairs each value field with its level field; a
    decoy operand is a (value, level) draw from the pool of all real
    operands, so decoy marginals match the real traffic.
    """
    n = len(recs)
    total = policy.padded_size(n)
    if total > n:
        pad = total - n
        decoys = np.empty(pad, dtype=recs.dtype)
        if n:
            pool_v = np.concatenate([recs[v] for v, _ in operand_fields])
            pool_l = np.concatenate([recs[l] for _, l in operand_fields])
        else:
            pool_v = rng.uniform(0.0, 1.0, size=8)
            pool_l = np.zeros(8, dtype=np.uint32)
        for v, l in operand_fields:
            idx = rng.integers(0, len(pool_v), size=pad)
            decoys[v] = pool_v[idx]
            decoys[l] = pool_l[idx]
        full = np.concatenate([recs, decoys])
    else:
        full = recs.copy()
    perm = rng.permutation(total)
    wire = full[perm]
    wire["id"] = np.arange(total, dtype=np.uint32)
    inv = np.empty(total, dtype=np.int64)
    inv[perm] = np.arange(total)
    return wire, inv[:n]


def _cmp_records(entries) -> np.ndarray:
    """entries: list of (width, lhs ciphertext, rhs ciphertext)."""
    total = sum(w for w, _, _ in entries)
    recs = np.zeros(total, dtype=CMP_DTYPE)
    pos = 0
    for w, lhs, rhs in entries:
        recs["lhs"][pos:pos + w] = _lanes(lhs.value, w)
        recs["lhs_level"][pos:pos + w] = lhs.level
        recs["rhs"][pos:pos + w] = _lanes(rhs.value, w)
        recs["rhs_level"][pos:pos + w] = rhs.level
        pos += w
    return recs


def _sqrt_records(entries) -> np.ndarray:
    total = sum(w for w, _ in entries)
    recs = np.zeros(total, dtype=SQRT_DTYPE)
    pos = 0
    for w, arg in entries:
        recs["value"][pos:pos + w] = _lanes(arg.value, w)
        recs["level"][pos:pos + w] = arg.level
        pos += w
    return recs


def _collect_requests(builder: GraphBuilder, roots) -> tuple[list[Comparison], list[SqrtRequest]]:
    """All comparisons/sqrts reachable from roots, including nested ones."""
    seen: set[int] = set()
    cmps: dict[int, Comparison] = {}
    sqrts: dict[int, SqrtRequest] = {}
    stack = list(roots)
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen.add(n.id)
        if n.op == "bool":
            cmp = builder.comparisons[n.payload]
            cmps[cmp.id] = cmp
            stack.extend((cmp.lhs, cmp.rhs))
        elif n.op == "sqrt":
            sqrts[n.payload] = builder.sqrts[n.payload]
            stack.append(n.a)
        else:
            stack.extend(k for k in (n.a, n.c) if k is not None)
    return (
        [cmps[i] for i in sorted(cmps)],
        [sqrts[i] for i in sorted(sqrts)],
    )


def _bind_response(width: int, values: np.ndarray, level: int) -> Ciphertext:
    v = float(values[0]) if width == 1 else values.astype(np.float64)
    return Ciphertext(v, level)


def run_interactive(ctx: CkksContext, builder: GraphBuilder, slots: dict[str, Expr],
                    client: Client, policy: DecoyPolicy = DecoyPolicy(),
                    seed: int = 0, evaluator: CipherEvaluator | None = None,
                    evaluate_slots: bool = True) -> ProtocolRun:
    """Resolve parameters wave by wave; rounds = dependency depth.

    Client answers come back encrypted at the full depth budget, which is
    the only level-restoration mechanism in the system.
    """
    rng = np.random.default_rng(seed)
    comparisons, sqrts = _collect_requests(builder, slots.values())
    by_tier: dict[int, tuple[list[Comparison], list[SqrtRequest]]] = {}
    for cmp in comparisons:
        t = builder.comparison_tier(cmp)
        by_tier.setdefault(t, ([], []))[0].append(cmp)
    for req in sqrts:
        t = builder.sqrt_tier(req)
        by_tier.setdefault(t, ([], []))[1].append(req)

    ev = evaluator if evaluator is not None else CipherEvaluator(ctx, builder)
    trace: list[RoundTrace] = []
    full = ctx.params.depth_budget
    for round_no, tier in enumerate(sorted(by_tier), start=1):
        tier_cmps, tier_sqrts = by_tier[tier]
        cmp_entries = [(c.width, ev.eval(c.lhs), ev.eval(c.rhs)) for c in tier_cmps]
        sqrt_entries = [(builder.sqrts[r.id].arg.width, ev.eval(r.arg)) for r in tier_sqrts]
        creq = _cmp_records(cmp_entries)
        sreq = _sqrt_records(sqrt_entries)
        cwire, cids = _pad_and_shuffle(
            creq, policy, rng, (("lhs", "lhs_level"), ("rhs", "rhs_level")))
        swire, sids = _pad_and_shuffle(sreq, policy, rng, (("value", "level"),))
        creq_blob = cwire.tobytes()
        sreq_blob = swire.tobytes()
        cresp_blob = client.resolve_comparisons(creq_blob) if len(cwire) else b""
        sresp_blob = client.resolve_sqrts(sreq_blob) if len(swire) else b""
        cresp = np.frombuffer(cresp_blob, dtype=RESP_DTYPE)
        sresp = np.frombuffer(sresp_blob, dtype=RESP_DTYPE)
        pos = 0
        for c in tier_cmps:
            vals = cresp["value"][cids[pos:pos + c.width]]
            ev.bool_cts[c.id] = _bind_response(c.width, vals, full)
            pos += c.width
        pos = 0
        for r in tier_sqrts:
            w = builder.sqrts[r.id].arg.width
            vals = sresp["value"][sids[pos:pos + w]]
            ev.sqrt_cts[r.id] = _bind_response(w, vals, full)
            pos += w
        trace.append(RoundTrace(
            round=round_no,
            n_real_comparisons=len(creq),
            n_real_sqrts=len(sreq),
            n_wire_comparisons=len(cwire),
            n_wire_sqrts=len(swire),
            request_bytes=len(creq_blob) + len(sreq_blob),
            response_bytes=len(cresp_blob) + len(sresp_blob),
        ))

    results = {name: ev.eval(e) for name, e in slots.items()} if evaluate_slots else {}
    return ProtocolRun(mode="interactive", results=results, rounds=trace)


# -- deferred package --------------------------------------------------------------


def serialize_package(program: LoweredProgram, policy: DecoyPolicy = DecoyPolicy(),
                      seed: int = 0) -> bytes:
    """Binary single-round package.

    Layout: magic, comparison records, sqrt records (both padded and
    shuffled like interactive batches), then per-slot residual tables
    that reference wire ids per lane.
    """
    rng = np.random.default_rng(seed)
    cmp_ids = sorted(program.cmp_operands)
    sqrt_ids = sorted(program.sqrt_args)
    widths = {c.id: c.width for c in program.comparisons}
    cmp_entries = []
    for cid in cmp_ids:
        lhs, rhs = program.cmp_operands[cid]
        cmp_entries.append((widths[cid], lhs, rhs))
    sqrt_entries = [(program.sqrt_args[sid].width, program.sqrt_args[sid]) for sid in sqrt_ids]
    creq = _cmp_records(cmp_entries)
    sreq = _sqrt_records(sqrt_entries)
    cwire, cpos = _pad_and_shuffle(creq, policy, rng, (("lhs", "lhs_level"), ("rhs", "rhs_level")))
    swire, spos = _pad_and_shuffle(sreq, policy, rng, (("value", "level"),))

    cmp_wire_ids: dict[int, np.ndarray] = {}
    pos = 0
    for cid, (w, _, _) in zip(cmp_ids, cmp_entries):
        cmp_wire_ids[cid] = cpos[pos:pos + w].astype(np.uint32)
        pos += w
    sqrt_wire_ids: dict[int, np.ndarray] = {}
    pos = 0
    for sid, (w, _) in zip(sqrt_ids, sqrt_entries):
        sqrt_wire_ids[sid] = spos[pos:pos + w].astype(np.uint32)
        pos += w

    # streamed into one buffer; the wire arrays dominate the package, so
    # they are dropped as soon as their bytes are written
    del creq, sreq
    buf = io.BytesIO()
    buf.write(_PKG_MAGIC)
    buf.write(struct.pack("<III", len(cwire), len(swire), len(program.slots)))
    buf.write(memoryview(np.ascontiguousarray(cwire)))
    buf.write(memoryview(np.ascontiguousarray(swire)))
    del cwire, swire
    for name in sorted(program.slots):
        rf = program.slots[name]
        nb = name.encode()
        width = rf.width
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<III", width, len(rf.bool_params), len(rf.sqrt_params)))
        for cid in rf.bool_params:
            buf.write(_lane_ids(cmp_wire_ids[cid], width).tobytes())
        for sid in rf.sqrt_params:
            buf.write(_lane_ids(sqrt_wire_ids[sid], width).tobytes())
        buf.write(struct.pack("<I", len(rf.monomials)))
        bool_local = {cid: i for i, cid in enumerate(rf.bool_params)}
        sqrt_local = {sid: i for i, sid in enumerate(rf.sqrt_params)}
        for params, coeff in rf.monomials:
            buf.write(struct.pack("<B", len(params)))
            for kind, pid in params:
                if kind == "b":
                    buf.write(struct.pack("<BH", 0, bool_local[pid]))
                else:
                    buf.write(struct.pack("<BH", 1, sqrt_local[pid]))
            buf.write(struct.pack("<I", coeff.level))
            lanes = np.ascontiguousarray(_lanes(coeff.value, width), dtype="<f8")
            buf.write(memoryview(lanes))
    return buf.getvalue()


def _lane_ids(ids: np.ndarray, width: int) -> np.ndarray:
    if len(ids) == width:
        return ids
    if len(ids) == 1:
        return np.repeat(ids, width)
    raise ValueError(f"parameter width {len(ids)} does not divide slot width {width}")


def parse_package(blob: bytes) -> dict:
    if blob[:8] != _PKG_MAGIC:
        raise ValueError("not a deferred package")
    off = 8
    n_cmp, n_sqrt, n_slots = struct.unpack_from("<III", blob, off)
    off += 12
    cmps = np.frombuffer(blob, dtype=CMP_DTYPE, count=n_cmp, offset=off)
    off += n_cmp * CMP_DTYPE.itemsize
    sqrts = np.frombuffer(blob, dtype=SQRT_DTYPE, count=n_sqrt, offset=off)
    off += n_sqrt * SQRT_DTYPE.itemsize
    slots: dict[str, dict] = {}
    for _ in range(n_slots):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        width, n_bool, n_sq = struct.unpack_from("<III", blob, off)
        off += 12
        bool_ids = []
        for _ in range(n_bool):
            bool_ids.append(np.frombuffer(blob, dtype="<u4", count=width, offset=off).copy())
            off += 4 * width
        sqrt_ids = []
        for _ in range(n_sq):
            sqrt_ids.append(np.frombuffer(blob, dtype="<u4", count=width, offset=off).copy())
            off += 4 * width
        (n_monos,) = struct.unpack_from("<I", blob, off)
        off += 4
        monomials = []
        for _ in range(n_monos):
            (n_params,) = struct.unpack_from("<B", blob, off)
            off += 1
            params = []
            for _ in range(n_params):
                kind, local = struct.unpack_from("<BH", blob, off)
                off += 3
                params.append(("b" if kind == 0 else "s", local))
            (level,) = struct.unpack_from("<I", blob, off)
            off += 4
            coeff = np.frombuffer(blob, dtype="<f8", count=width, offset=off).copy()
            off += 8 * width
            monomials.append((tuple(params), coeff, level))
        slots[name] = {
            "width": width,
            "bool_ids": bool_ids,
            "sqrt_ids": sqrt_ids,
            "monomials": monomials,
        }
    return {"comparisons": cmps, "sqrts": sqrts, "slots": slots}


def dump_package(blob: bytes) -> str:
    """Human-readable package listing, stable for golden comparisons."""
    pkg = parse_package(blob)
    lines = [f"comparisons: {len(pkg['comparisons'])}", f"sqrts: {len(pkg['sqrts'])}"]
    for rec in pkg["comparisons"]:
        lines.append(
            f"  #{int(rec['id'])} lhs={rec['lhs']:.6g}@{int(rec['lhs_level'])}"
            f" rhs={rec['rhs']:.6g}@{int(rec['rhs_level'])}"
        )
    for rec in pkg["sqrts"]:
        lines.append(f"  #{int(rec['id'])} arg={rec['value']:.6g}@{int(rec['level'])}")
    for name in sorted(pkg["slots"]):
        slot = pkg["slots"][name]
        lines.append(f"slot {name}: width={slot['width']}")
        for i, ids in enumerate(slot["bool_ids"]):
            lines.append(f"  b{i} -> wire {list(map(int, ids))}")
        for i, ids in enumerate(slot["sqrt_ids"]):
            lines.append(f"  s{i} -> wire {list(map(int, ids))}")
        for params, coeff, level in slot["monomials"]:
            key = "*".join(f"{k}{i}" for k, i in params) or "1"
            vals = " ".join(f"{v:.6g}" for v in coeff)
            lines.append(f"  {key} : [{vals}] @{level}")
    return "\n".join(lines) + "\n"


def run_deferred(ctx: CkksContext, builder: GraphBuilder, slots: dict[str, Expr],
                 client: Client, policy: DecoyPolicy = DecoyPolicy(),
                 seed: int = 0, program: LoweredProgram | None = None) -> ProtocolRun:
    """Single-round delegation; raises DeferralUnsupported when the
    program needs resolved parameters to state its own requests."""
    if program is None:
        program = lower(builder, slots, ctx)
    blob = serialize_package(program, policy, seed)
    results = client.resolve_package(blob)
    n_cmp = sum(c.width for c in program.comparisons)
    n_sqrt = sum(a.width for a in program.sqrt_args.values())
    pkg = parse_package(blob)
    trace = [RoundTrace(
        round=1,
        n_real_comparisons=n_cmp,
        n_real_sqrts=n_sqrt,
        n_wire_comparisons=len(pkg["comparisons"]),
        n_wire_sqrts=len(pkg["sqrts"]),
        request_bytes=len(blob),
        response_bytes=0,
    )]
    return ProtocolRun(
        mode="deferred",
        results=results,
        rounds=trace,
        leakage=program.leakage,
        package_bytes=len(blob),
    )
