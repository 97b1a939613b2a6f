"""Deferred computation graphs over simulated ciphertexts.

Programs are built as hash-consed expression DAGs.  Arithmetic stays
server-side; comparisons and square roots become unresolved parameters
(BoolVar / Sqrt nodes) that only a key-holding client can resolve.  The
engine can:

  * simplify an expression to its multilinear normal form over those
    parameters (booleans are idempotent, a squared sqrt collapses to its
    argument), with pure-arithmetic expressions as coefficients;
  * lower a set of named output slots to comparison/sqrt requests plus
    residual functions whose coefficients are evaluated ciphertexts;
  * evaluate expressions under three regimes: plaintext (comparisons
    resolved inline), ciphertext (parameters bound to encrypted values
    supplied by a client), and residual (client-side, on decrypted values).

Comparison semantics are strict: ``compare(a, b)`` is the boolean [a > b].
Each unordered operand pair is recorded once; building the reversed
comparison yields the complement ``1 - BoolVar``, which makes the reverse
form a "greater or equal".  Ties therefore resolve deterministically.

Evaluation-order discipline: normal forms keep monomials in a canonical
order, parameter products fold as balanced trees and sums fold left.  The
server-side ciphertext walk and the client-side residual walk perform the
same float operations in the same order, so exact-mode results agree
bit for bit across execution modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ckks_sim import Ciphertext, CkksContext, Value
from .errors import (
    DeferralUnsupported,
    MissingAssignment,
    SignUnresolvable,
)

# Node opcodes.
CIPHER = "cipher"
PLAIN = "plain"
ADD = "add"
NEG = "neg"
MUL = "mul"
BOOL = "bool"
SQRT = "sqrt"

_POSITIVE = "positive"
_NEGATIVE = "negative"
_UNKNOWN = "unknown"


def balanced_fold(items: list, combine):
    """Tournament-style fold; tree shape depends only on len(items)."""
    if not items:
        raise ValueError("balanced_fold needs at least one item")
    items = list(items)
    while len(items) > 1:
        nxt = [combine(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


class Expr:
    """One DAG node. Construct through a GraphBuilder, never directly."""

    __slots__ = ("b", "op", "a", "c", "payload", "id", "width", "pure", "name")

    def __init__(self, b, op, a, c, payload, ident, width, pure, name=None):
        self.b = b
        self.op = op
        self.a = a
        self.c = c
        self.payload = payload
        self.id = ident
        self.width = width
        self.pure = pure
        self.name = name

    # Arithmetic sugar; comparisons stay explicit via builder.compare.
    def __add__(self, other):
        return self.b.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.b.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self.b.sub(self, other)

    def __rsub__(self, other):
        return self.b.sub(other, self)

    def __neg__(self):
        return self.b.neg(self)

    def __repr__(self):
        return f"Expr#{self.id}<{self.op}>"


@dataclass(frozen=True)
class Comparison:
    """Canonical strict comparison [lhs > rhs]."""

    id: int
    lhs: Expr
    rhs: Expr
    width: int


@dataclass(frozen=True)
class SqrtRequest:
    id: int
    arg: Expr


@dataclass(frozen=True)
class Rational:
    """A division kept symbolic: num/den plus what is known about sign(den)."""

    num: Expr
    den: Expr
    den_sign: str = _UNKNOWN

    def lt(self, other) -> Expr:
        return self.num.b.rational_lt(self, other)

    def gt(self, other) -> Expr:
        return self.num.b.rational_gt(self, other)

    def abs_le(self, bound) -> Expr:
        return self.num.b.rational_abs_le(self, bound)


def _bool_key(cmp_id: int):
    return ("b", cmp_id)


def _sqrt_key(sqrt_id: int):
    return ("s", sqrt_id)


class GraphBuilder:
    """Single-writer construction context for one program's DAG.

    Node identity is structural: identical (op, children, payload) terms
    intern to the same node, so repeated subterms share comparisons and
    coefficients for free.  Plain scalars intern by value; array payloads
    and ciphertexts intern by object identity.
    """

    def __init__(self, allow_sign_resolution: bool = True):
        self.allow_sign_resolution = allow_sign_resolution
        self.nodes: list[Expr] = []
        self.comparisons: list[Comparison] = []
        self.sqrts: list[SqrtRequest] = []
        self._intern: dict = {}
        self._cmp_by_pair: dict[tuple[int, int], int] = {}
        self._bool_nodes: dict[int, Expr] = {}
        self._sqrt_nodes: dict[int, Expr] = {}
        self._nf_memo: dict[int, dict] = {}
        self._tier_memo: dict[int, int] = {}
        self._cipher_count = 0

    # -- node construction -------------------------------------------------

    def _node(self, op, a=None, c=None, payload=None, key=None, width=1, pure=True, name=None):
        if key is not None and key in self._intern:
            return self._intern[key]
        node = Expr(self, op, a, c, payload, len(self.nodes), width, pure, name)
        self.nodes.append(node)
        if key is not None:
            self._intern[key] = node
        return node

    @staticmethod
    def _bw(x: Expr, y: Expr) -> int:
        if x.width == y.width:
            return x.width
        if x.width == 1:
            return y.width
        if y.width == 1:
            return x.width
        raise ValueError(f"width mismatch: {x.width} vs {y.width}")

    def cipher(self, ct: Ciphertext, name: str | None = None) -> Expr:
        if name is None:
            name = f"v{self._cipher_count}"
        self._cipher_count += 1
        return self._node(
            CIPHER, payload=ct, key=(CIPHER, id(ct)), width=ct.width, pure=True, name=name
        )

    def plain(self, k, name: str | None = None) -> Expr:
        arr = np.asarray(k, dtype=np.float64)
        if arr.ndim == 0:
            val = float(arr)
            return self._node(PLAIN, payload=val, key=(PLAIN, val), width=1, pure=True, name=name)
        return self._node(
            PLAIN, payload=arr, key=(PLAIN, id(arr)), width=arr.size, pure=True, name=name
        )

    def as_expr(self, x) -> Expr:
        if isinstance(x, Expr):
            return x
        return self.plain(x)

    @staticmethod
    def _is_const(e: Expr, v: float) -> bool:
        return e.op == PLAIN and not isinstance(e.payload, np.ndarray) and e.payload == v

    def add(self, x, y) -> Expr:
        x, y = self.as_expr(x), self.as_expr(y)
        if x.op == PLAIN and y.op == PLAIN:
            return self.plain(np.asarray(x.payload) + np.asarray(y.payload))
        if self._is_const(x, 0.0):
            return y
        if self._is_const(y, 0.0):
            return x
        a, c = (x, y) if x.id <= y.id else (y, x)
        return self._node(
            ADD, a=a, c=c, key=(ADD, a.id, c.id), width=self._bw(x, y), pure=x.pure and y.pure
        )

    def neg(self, x) -> Expr:
        x = self.as_expr(x)
        if x.op == PLAIN:
            return self.plain(-np.asarray(x.payload))
        if x.op == NEG:
            return x.a
        return self._node(NEG, a=x, key=(NEG, x.id), width=x.width, pure=x.pure)

    def sub(self, x, y) -> Expr:
        return self.add(self.as_expr(x), self.neg(y))

    def mul(self, x, y) -> Expr:
        x, y = self.as_expr(x), self.as_expr(y)
        if x.op == PLAIN and y.op == PLAIN:
            return self.plain(np.asarray(x.payload) * np.asarray(y.payload))
        if self._is_const(x, 1.0):
            return y
        if self._is_const(y, 1.0):
            return x
        if self._is_const(x, 0.0) or self._is_const(y, 0.0):
            return self.plain(0.0)
        a, c = (x, y) if x.id <= y.id else (y, x)
        return self._node(
            MUL, a=a, c=c, key=(MUL, a.id, c.id), width=self._bw(x, y), pure=x.pure and y.pure
        )

    def sum_(self, xs) -> Expr:
        xs = list(xs)
        if not xs:
            return self.plain(0.0)
        out = self.as_expr(xs[0])
        for x in xs[1:]:
            out = self.add(out, x)
        return out

    def product(self, xs) -> Expr:
        xs = [self.as_expr(x) for x in xs]
        if not xs:
            return self.plain(1.0)
        return balanced_fold(xs, self.mul)

    # -- comparisons, selection, sqrt ---------------------------------------

    def compare(self, lhs, rhs) -> Expr:
        """Strict [lhs > rhs].

        The first orientation seen for an operand pair is canonical; the
        reversed call returns 1 - BoolVar, i.e. a non-strict "rhs >= lhs"
        turned around.  compare(x, x) stays a real BoolVar resolving to 0.
        """
        lhs, rhs = self.as_expr(lhs), self.as_expr(rhs)
        pair = (lhs.id, rhs.id)
        if pair in self._cmp_by_pair:
            return self._bool_nodes[self._cmp_by_pair[pair]]
        rev = (rhs.id, lhs.id)
        if rev in self._cmp_by_pair:
            canonical = self._bool_nodes[self._cmp_by_pair[rev]]
            return self.sub(self.plain(1.0), canonical)
        cmp_id = len(self.comparisons)
        self.comparisons.append(Comparison(cmp_id, lhs, rhs, self._bw(lhs, rhs)))
        node = self._node(
            BOOL, payload=cmp_id, key=(BOOL, cmp_id), width=self._bw(lhs, rhs), pure=False
        )
        self._cmp_by_pair[pair] = cmp_id
        self._bool_nodes[cmp_id] = node
        return node

    def select(self, cond, then, els) -> Expr:
        """Branchless cond*(then-els) + els; exactly one multiplication."""
        cond, then, els = self.as_expr(cond), self.as_expr(then), self.as_expr(els)
        if cond.op == PLAIN and not isinstance(cond.payload, np.ndarray):
            if cond.payload == 1.0:
                return then
            if cond.payload == 0.0:
                return els
        if then is els:
            return then
        return self.add(self.mul(cond, self.sub(then, els)), els)

    def sqrt_deferred(self, arg) -> Expr:
        """Square root left for the client; one request per distinct argument."""
        arg = self.as_expr(arg)
        key = (SQRT, arg.id)
        if key in self._intern:
            return self._intern[key]
        sqrt_id = len(self.sqrts)
        self.sqrts.append(SqrtRequest(sqrt_id, arg))
        node = self._node(SQRT, a=arg, payload=sqrt_id, key=key, width=arg.width, pure=False)
        self._sqrt_nodes[sqrt_id] = node
        return node

    # -- rationals -----------------------------------------------------------

    def rational_div(self, num, den, den_sign: str = _UNKNOWN) -> Rational:
        if den_sign not in (_POSITIVE, _NEGATIVE, _UNKNOWN):
            raise ValueError(f"bad den_sign {den_sign!r}")
        num, den = self.as_expr(num), self.as_expr(den)
        if den.op == PLAIN and not isinstance(den.payload, np.ndarray):
            if den.payload == 0.0:
                raise ValueError("rational with constant zero denominator")
            den_sign = _POSITIVE if den.payload > 0 else _NEGATIVE
        return Rational(num, den, den_sign)

    def _as_rational(self, x) -> Rational:
        if isinstance(x, Rational):
            return x
        return Rational(self.as_expr(x), self.plain(1.0), _POSITIVE)

    def rational_lt(self, r, s) -> Expr:
        """[r < s] with denominators cleared.

        Cross-multiplies and orients the strict comparison by the sign of
        the combined denominator.  An unknown sign costs one extra
        comparison [den > 0] plus a select between the two orientations.
        """
        r, s = self._as_rational(r), self._as_rational(s)
        ad = self.mul(r.num, s.den)
        cb = self.mul(s.num, r.den)
        flips = (r.den_sign == _NEGATIVE) + (s.den_sign == _NEGATIVE)
        unknown = [q.den for q in (r, s) if q.den_sign == _UNKNOWN]
        if not unknown:
            return self.compare(cb, ad) if flips % 2 == 0 else self.compare(ad, cb)
        if not self.allow_sign_resolution:
            raise SignUnresolvable(
                "denominator sign unknown and sign resolution is disabled"
            )
        prod = unknown[0] if len(unknown) == 1 else self.mul(unknown[0], unknown[1])
        den_pos = self.compare(prod, self.plain(0.0))
        pos = self.compare(cb, ad) if flips % 2 == 0 else self.compare(ad, cb)
        neg = self.compare(ad, cb) if flips % 2 == 0 else self.compare(cb, ad)
        return self.select(den_pos, pos, neg)

    def rational_gt(self, r, s) -> Expr:
        return self.rational_lt(self._as_rational(s), self._as_rational(r))

    def rational_abs_le(self, r: Rational, bound) -> Expr:
        """[|num/den| <= bound] via squaring; needs no denominator sign."""
        if isinstance(bound, Expr):
            b2 = self.mul(bound, bound)
        else:
            b2 = self.plain(float(bound) * float(bound))
        n2 = self.mul(r.num, r.num)
        d2 = self.mul(r.den, r.den)
        return self.sub(self.plain(1.0), self.compare(n2, self.mul(b2, d2)))

    # -- dependency tiers ------------------------------------------------------

    def tier(self, e: Expr) -> int:
        """Resolution wave the node becomes evaluable in (0 = pure)."""
        memo = self._tier_memo
        if e.id in memo:
            return memo[e.id]
        stack = [e]
        while stack:
            n = stack[-1]
            if n.id in memo:
                stack.pop()
                continue
            if n.pure:
                memo[n.id] = 0
                stack.pop()
                continue
            if n.op == BOOL:
                cmp = self.comparisons[n.payload]
                kids = [cmp.lhs, cmp.rhs]
            elif n.op == SQRT:
                kids = [n.a]
            else:
                kids = [k for k in (n.a, n.c) if k is not None]
            pending = [k for k in kids if k.id not in memo]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            m = max((memo[k.id] for k in kids), default=0)
            memo[n.id] = m + 1 if n.op in (BOOL, SQRT) else m
        return memo[e.id]

    def comparison_tier(self, cmp: Comparison) -> int:
        return 1 + max(self.tier(cmp.lhs), self.tier(cmp.rhs))

    def sqrt_tier(self, req: SqrtRequest) -> int:
        return 1 + self.tier(req.arg)

    def dependency_depth(self, exprs) -> int:
        return max((self.tier(e) for e in exprs), default=0)

    # -- multilinear normal form ------------------------------------------------

    def _mul_terms(self, p1, c1, p2, c2):
        params = {k for k in p1 if k[0] == "b"} | {k for k in p2 if k[0] == "b"}
        sqrt_keys = [k for k in p1 if k[0] == "s"] + [k for k in p2 if k[0] == "s"]
        coeff = self.mul(c1, c2)
        seen: dict = {}
        for k in sqrt_keys:
            seen[k] = seen.get(k, 0) + 1
        for k, n in sorted(seen.items()):
            arg = self.sqrts[k[1]].arg
            if n >= 2:
                if not arg.pure:
                    raise DeferralUnsupported(
                        "cannot square a sqrt parameter whose argument is unresolved"
                    )
                for _ in range(n // 2):
                    coeff = self.mul(coeff, arg)
            if n % 2:
                params.add(k)
        return frozenset(params), coeff

    def normal_form(self, e: Expr) -> dict:
        """Map frozenset(param keys) -> pure coefficient Expr.

        Parameters are ("b", comparison id) and ("s", sqrt id).  Booleans
        are idempotent so monomials are genuine sets; a squared sqrt
        parameter is substituted by its argument.
        """
        memo = self._nf_memo
        if e.id in memo:
            return memo[e.id]
        stack = [e]
        while stack:
            n = stack[-1]
            if n.id in memo:
                stack.pop()
                continue
            if n.pure:
                memo[n.id] = {frozenset(): n}
                stack.pop()
                continue
            if n.op == BOOL:
                memo[n.id] = {frozenset({_bool_key(n.payload)}): self.plain(1.0)}
                stack.pop()
                continue
            if n.op == SQRT:
                memo[n.id] = {frozenset({_sqrt_key(n.payload)}): self.plain(1.0)}
                stack.pop()
                continue
            kids = [k for k in (n.a, n.c) if k is not None]
            pending = [k for k in kids if k.id not in memo]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            if n.op == ADD:
                out: dict = dict(memo[n.a.id])
                for params, coeff in memo[n.c.id].items():
                    out[params] = self.add(out[params], coeff) if params in out else coeff
            elif n.op == NEG:
                out = {params: self.neg(coeff) for params, coeff in memo[n.a.id].items()}
            elif n.op == MUL:
                out = {}
                for pa, ca in memo[n.a.id].items():
                    for pc, cc in memo[n.c.id].items():
                        params, coeff = self._mul_terms(pa, ca, pc, cc)
                        out[params] = self.add(out[params], coeff) if params in out else coeff
            else:  # pragma: no cover - exhaustive over opcodes
                raise AssertionError(n.op)
            memo[n.id] = {
                params: coeff
                for params, coeff in out.items()
                if not self._is_const(coeff, 0.0)
            }
        return memo[e.id]

    @staticmethod
    def sorted_terms(nf: dict) -> list:
        return sorted(nf.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))

    def _param_node(self, key) -> Expr:
        return self._bool_nodes[key[1]] if key[0] == "b" else self._sqrt_nodes[key[1]]

    def simplify(self, e: Expr) -> Expr:
        """Rebuild e from its multilinear normal form, canonically ordered.

        Idempotent: simplify(simplify(e)) interns to the same node.
        """
        terms = self.sorted_terms(self.normal_form(e))
        out = None
        for params, coeff in terms:
            factors = [self._param_node(k) for k in sorted(params)]
            term = self.mul(self.product(factors), coeff) if factors else coeff
            out = term if out is None else self.add(out, term)
        return out if out is not None else self.plain(0.0)


# -- evaluation ------------------------------------------------------------------


class PlainEvaluator:
    """Evaluates a DAG on raw values, resolving comparisons inline.

    Cipher leaves contribute their carried values; boolean parameters
    become exact 0.0/1.0 floats, so masked arithmetic matches a branch.
    """

    def __init__(self, builder: GraphBuilder):
        self.b = builder
        self.memo: dict[int, Value] = {}

    def _kids(self, n: Expr):
        if n.op == BOOL:
            cmp = self.b.comparisons[n.payload]
            return (cmp.lhs, cmp.rhs)
        if n.op == SQRT:
            return (n.a,)
        return tuple(k for k in (n.a, n.c) if k is not None)

    def _compute(self, n: Expr) -> Value:
        m = self.memo
        if n.op == CIPHER:
            return n.payload.value
        if n.op == PLAIN:
            return n.payload
        if n.op == ADD:
            return m[n.a.id] + m[n.c.id]
        if n.op == NEG:
            return -np.asarray(m[n.a.id]) if isinstance(m[n.a.id], np.ndarray) else -m[n.a.id]
        if n.op == MUL:
            return m[n.a.id] * m[n.c.id]
        if n.op == BOOL:
            cmp = self.b.comparisons[n.payload]
            out = np.greater(m[cmp.lhs.id], m[cmp.rhs.id]).astype(np.float64)
            return float(out) if out.ndim == 0 else out
        if n.op == SQRT:
            return np.sqrt(m[n.a.id])
        raise AssertionError(n.op)  # pragma: no cover

    def eval(self, root: Expr) -> Value:
        memo = self.memo
        stack = [root]
        while stack:
            n = stack[-1]
            if n.id in memo:
                stack.pop()
                continue
            pending = [k for k in self._kids(n) if k.id not in memo]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            memo[n.id] = self._compute(n)
        return memo[root.id]

    def bool_value(self, cmp: Comparison) -> Value:
        lhs, rhs = self.eval(cmp.lhs), self.eval(cmp.rhs)
        out = np.greater(lhs, rhs).astype(np.float64)
        return float(out) if out.ndim == 0 else out


class CipherEvaluator:
    """Evaluates a DAG to ciphertexts through a simulator context.

    BoolVar / Sqrt nodes must already be bound to encrypted values (the
    interactive protocol binds them round by round); hitting an unbound
    parameter raises MissingAssignment.
    """

    def __init__(self, ctx: CkksContext, builder: GraphBuilder,
                 bool_cts: dict[int, Ciphertext] | None = None,
                 sqrt_cts: dict[int, Ciphertext] | None = None):
        self.ctx = ctx
        self.b = builder
        self.bool_cts = bool_cts if bool_cts is not None else {}
        self.sqrt_cts = sqrt_cts if sqrt_cts is not None else {}
        self.memo: dict[int, Ciphertext] = {}

    def _compute(self, n: Expr) -> Ciphertext:
        m = self.memo
        ctx = self.ctx
        if n.op == CIPHER:
            return n.payload
        if n.op == PLAIN:
            # Public constants ride along unencrypted; wrap at full level.
            return Ciphertext(n.payload, ctx.params.depth_budget, 0.0)
        if n.op == ADD:
            return ctx.add(m[n.a.id], m[n.c.id])
        if n.op == NEG:
            return ctx.neg(m[n.a.id])
        if n.op == MUL:
            x, y = m[n.a.id], m[n.c.id]
            if n.a.op == PLAIN:
                return ctx.mul_plain(y, n.a.payload)
            if n.c.op == PLAIN:
                return ctx.mul_plain(x, n.c.payload)
            return ctx.mul(x, y)
        if n.op == BOOL:
            if n.payload not in self.bool_cts:
                raise MissingAssignment(f"comparison {n.payload} is unresolved")
            return self.bool_cts[n.payload]
        if n.op == SQRT:
            if n.payload not in self.sqrt_cts:
                raise MissingAssignment(f"sqrt request {n.payload} is unresolved")
            return self.sqrt_cts[n.payload]
        raise AssertionError(n.op)  # pragma: no cover

    def eval(self, root: Expr) -> Ciphertext:
        memo = self.memo
        stack = [root]
        while stack:
            n = stack[-1]
            if n.id in memo:
                stack.pop()
                continue
            if n.op in (BOOL, SQRT):
                memo[n.id] = self._compute(n)
                stack.pop()
                continue
            kids = [k for k in (n.a, n.c) if k is not None and k.id not in memo]
            if kids:
                stack.extend(kids)
                continue
            stack.pop()
            memo[n.id] = self._compute(n)
        return memo[root.id]


# -- lowering ---------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualFunction:
    """Client-evaluable multilinear function with ciphertext coefficients.

    ``monomials`` holds (sorted parameter-key tuple, coefficient) pairs in
    canonical order.  Evaluation sums every term left to right and folds
    parameter products as balanced trees, mirroring the server-side walk.
    """

    bool_params: tuple[int, ...]
    sqrt_params: tuple[int, ...]
    monomials: tuple[tuple[tuple, Ciphertext], ...]
    width: int

    def evaluate(self, bools: dict[int, Value], sqrts: dict[int, Value] | None = None,
                 decrypt=None) -> Value:
        """Combine resolved parameter values with the coefficients.

        ``decrypt`` maps a coefficient ciphertext to its value; the client
        passes its key's decrypt method so every read is accounted for.
        """
        sqrts = sqrts or {}
        for cid in self.bool_params:
            if cid not in bools:
                raise MissingAssignment(f"no boolean assignment for comparison {cid}")
        for sid in self.sqrt_params:
            if sid not in sqrts:
                raise MissingAssignment(f"no value for sqrt request {sid}")
        if decrypt is None:
            decrypt = lambda ct: ct.value
        acc = None
        for params, coeff in self.monomials:
            vals = [bools[p[1]] if p[0] == "b" else sqrts[p[1]] for p in params]
            if vals:
                prod = balanced_fold(vals, lambda x, y: x * y)
                term = prod * decrypt(coeff)
            else:
                term = decrypt(coeff)
            acc = term if acc is None else acc + term
        if acc is None:
            return 0.0
        return acc


@dataclass
class LoweredProgram:
    """Lowered slots plus the requests their parameters stand for."""

    comparisons: list[Comparison]
    cmp_operands: dict[int, tuple[Ciphertext, Ciphertext]]
    sqrt_args: dict[int, Ciphertext]
    slots: dict[str, ResidualFunction]
    leakage: dict[str, int]


def lower(builder: GraphBuilder, slots: dict[str, Expr], ctx: CkksContext,
          evaluator: CipherEvaluator | None = None) -> LoweredProgram:
    """Lower named output slots to requests plus residual functions.

    Every comparison and sqrt argument must be pure arithmetic (no nested
    unresolved parameters), otherwise the program needs mid-stream
    re-encryption and only the interactive path can run it.  Coefficients
    are evaluated server-side here, consuming simulator levels; passing a
    shared evaluator lets successive calls reuse each other's work.
    """
    ev = evaluator if evaluator is not None else CipherEvaluator(ctx, builder)
    used_cmp: set[int] = set()
    used_sqrt: set[int] = set()
    residuals: dict[str, ResidualFunction] = {}
    total_monomials = 0

    for name in slots:
        nf = builder.sorted_terms(builder.normal_form(slots[name]))
        bool_ids = sorted({k[1] for params, _ in nf for k in params if k[0] == "b"})
        sqrt_ids = sorted({k[1] for params, _ in nf for k in params if k[0] == "s"})
        used_cmp.update(bool_ids)
        used_sqrt.update(sqrt_ids)
        monos = []
        width = slots[name].width
        for params, coeff in nf:
            monos.append((tuple(sorted(params)), ev.eval(coeff)))
        residuals[name] = ResidualFunction(
            tuple(bool_ids), tuple(sqrt_ids), tuple(monos), width
        )
        total_monomials += len(monos)

    cmp_operands: dict[int, tuple[Ciphertext, Ciphertext]] = {}
    comparisons = []
    for cid in sorted(used_cmp):
        cmp = builder.comparisons[cid]
        if not (cmp.lhs.pure and cmp.rhs.pure):
            raise DeferralUnsupported(
                f"comparison {cid} depends on other unresolved parameters; "
                "it cannot ship in a single deferred package"
            )
        cmp_operands[cid] = (ev.eval(cmp.lhs), ev.eval(cmp.rhs))
        comparisons.append(cmp)
    sqrt_args: dict[int, Ciphertext] = {}
    for sid in sorted(used_sqrt):
        req = builder.sqrts[sid]
        if not req.arg.pure:
            raise DeferralUnsupported(
                f"sqrt request {sid} depends on other unresolved parameters; "
                "it cannot ship in a single deferred package"
            )
        sqrt_args[sid] = ev.eval(req.arg)

    leakage = {
        "bool_params": len(used_cmp),
        "sqrt_params": len(used_sqrt),
        "monomials": total_monomials,
    }
    return LoweredProgram(comparisons, cmp_operands, sqrt_args, residuals, leakage)


# -- pretty printing ----------------------------------------------------------------


def _prec(op: str) -> int:
    return {ADD: 1, NEG: 2, MUL: 3}.get(op, 9)


def format_expr(e: Expr) -> str:
    """Deterministic infix rendering; add(x, neg(y)) prints as x - y."""

    def walk(n: Expr, parent_prec: int) -> str:
        if n.op == CIPHER:
            s = n.name or f"v{n.id}"
        elif n.op == PLAIN:
            if isinstance(n.payload, np.ndarray):
                s = f"plain<{n.width}>"
            else:
                s = f"{n.payload:g}"
        elif n.op == BOOL:
            s = f"c{n.payload + 1}"
        elif n.op == SQRT:
            s = f"s{n.payload + 1}"
        elif n.op == ADD:
            def neg_plain(k: Expr) -> bool:
                return k.op == PLAIN and not isinstance(k.payload, np.ndarray) and k.payload < 0
            if n.c.op == NEG:
                s = f"{walk(n.a, 1)} - {walk(n.c.a, 2)}"
            elif n.a.op == NEG:
                s = f"{walk(n.c, 1)} - {walk(n.a.a, 2)}"
            elif neg_plain(n.c):
                s = f"{walk(n.a, 1)} - {-n.c.payload:g}"
            elif neg_plain(n.a):
                s = f"{walk(n.c, 1)} - {-n.a.payload:g}"
            else:
                s = f"{walk(n.a, 1)} + {walk(n.c, 1)}"
        elif n.op == NEG:
            s = f"-{walk(n.a, 2)}"
        elif n.op == MUL:
            s = f"{walk(n.a, 3)}*{walk(n.c, 3)}"
        else:  # pragma: no cover
            raise AssertionError(n.op)
        if _prec(n.op) < parent_prec:
            return f"({s})"
        return s

    return walk(e, 0)


def format_normal_form(builder: GraphBuilder, slots: dict[str, Expr]) -> str:
    """Stable text dump of lowered structure, for golden tests."""
    lines = []
    used: list[int] = []
    used_sqrt: list[int] = []
    rendered = {}
    for name in sorted(slots):
        terms = builder.sorted_terms(builder.normal_form(slots[name]))
        for params, _ in terms:
            for k in params:
                if k[0] == "b" and k[1] not in used:
                    used.append(k[1])
                if k[0] == "s" and k[1] not in used_sqrt:
                    used_sqrt.append(k[1])
        rendered[name] = terms
    lines.append("params:")
    for cid in sorted(used):
        cmp = builder.comparisons[cid]
        lines.append(f"  c{cid + 1} = [{format_expr(cmp.lhs)} > {format_expr(cmp.rhs)}]")
    for sid in sorted(used_sqrt):
        req = builder.sqrts[sid]
        lines.append(f"  s{sid + 1} = sqrt({format_expr(req.arg)})")
    for name in sorted(slots):
        lines.append(f"slot {name}:")
        for params, coeff in rendered[name]:
            key = "*".join(
                (f"c{p[1] + 1}" if p[0] == "b" else f"s{p[1] + 1}") for p in sorted(params)
            )
            lines.append(f"  {key or '1'} : {format_expr(coeff)}")
    return "\n".join(lines) + "\n"
