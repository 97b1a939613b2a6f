"""Leveled-ciphertext arithmetic simulator.

Stands in for an approximate-arithmetic FHE backend.  Every ciphertext
carries the value it encrypts, the number of multiplications it can still
absorb (its level) and a running error bound.  The simulator is exact about
the two things the rest of the package leans on -- multiplicative depth and
operation counts -- and optionally injects per-multiplication noise.

A ciphertext value may be a scalar or an ndarray.  An ndarray ciphertext is
a batch of independent ciphertexts that happen to share level bookkeeping;
uniform circuits keep levels identical lane by lane, which is the only way
the package ever uses them.  There is no slot packing: lanes never interact
and there are no rotation ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DepthExhausted

Value = float | np.ndarray

# Injected noise is drawn from a clipped Gaussian so the accumulated
# noise_bound is a hard bound rather than a high-probability one.
_CLIP_SIGMAS = 6.0


@dataclass(frozen=True)
class SimParams:
    """Backend configuration.

    depth_budget: levels a fresh ciphertext starts with; must be >= 1.
    noise_per_mul: stddev of the error each ct-ct multiply injects (0 = exact).
    plain_mul_consumes_level: whether plaintext multiplication costs a level,
        mirroring backends that rescale after every multiplication.
    """

    depth_budget: int = 30
    noise_per_mul: float = 0.0
    plain_mul_consumes_level: bool = True

    def __post_init__(self):
        if self.depth_budget < 1:
            raise ValueError("depth_budget must be >= 1")
        if self.noise_per_mul < 0:
            raise ValueError("noise_per_mul must be >= 0")


def _as_value(x) -> Value:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    return arr


@dataclass(frozen=True)
class Ciphertext:
    """Simulated ciphertext: carried value, remaining levels, error bound."""

    value: Value
    level: int
    noise_bound: Value = 0.0

    @property
    def width(self) -> int:
        return self.value.size if isinstance(self.value, np.ndarray) else 1


class SecretKey:
    """Decryption capability.

    Server-side code never holds one; the counter exists so runs can prove
    which side of a protocol decrypted and how often.
    """

    __slots__ = ("decrypt_calls",)

    def __init__(self):
        self.decrypt_calls = 0

    def decrypt(self, ct: Ciphertext) -> Value:
        self.decrypt_calls += 1
        v = ct.value
        return v.copy() if isinstance(v, np.ndarray) else v


def _join(a: Value, b: Value, op) -> Value:
    out = op(np.asarray(a), np.asarray(b))
    return _as_value(out)


def _zero_bound(nb: Value) -> bool:
    return not isinstance(nb, np.ndarray) and nb == 0.0


class CkksContext:
    """Operation context: holds parameters, the noise source and op counters.

    All ops are pure with respect to their ciphertext arguments (inputs are
    never mutated); the context itself accumulates counters and RNG state.
    """

    def __init__(self, params: SimParams | None = None, seed: int = 0):
        self.params = params or SimParams()
        self._rng = np.random.default_rng(seed)
        self.op_counts: dict[str, int] = {
            "encrypt": 0,
            "add": 0,
            "neg": 0,
            "mul": 0,
            "mul_plain": 0,
        }

    # -- helpers ---------------------------------------------------------

    def _count(self, name: str, width: int):
        self.op_counts[name] += width

    def snapshot_counts(self) -> dict[str, int]:
        return dict(self.op_counts)

    # -- core ops --------------------------------------------------------

    def encrypt(self, x) -> Ciphertext:
        v = _as_value(x)
        if isinstance(v, np.ndarray):
            v = v.copy()
        ct = Ciphertext(v, self.params.depth_budget, 0.0)
        self._count("encrypt", ct.width)
        return ct

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        v = _join(a.value, b.value, np.add)
        nb = _join(a.noise_bound, b.noise_bound, np.add)
        out = Ciphertext(v, min(a.level, b.level), nb)
        self._count("add", out.width)
        return out

    def sub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        v = _join(a.value, b.value, np.subtract)
        nb = _join(a.noise_bound, b.noise_bound, np.add)
        out = Ciphertext(v, min(a.level, b.level), nb)
        self._count("add", out.width)
        return out

    def neg(self, a: Ciphertext) -> Ciphertext:
        out = Ciphertext(_as_value(-np.asarray(a.value)), a.level, a.noise_bound)
        self._count("neg", out.width)
        return out

    def mul(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        lvl = min(a.level, b.level)
        if lvl < 1:
            raise DepthExhausted(
                f"ct-ct multiply at level {lvl}: no multiplicative levels left"
            )
        v = _join(a.value, b.value, np.multiply)
        # |carried - ideal| stays bounded: cross terms use carried magnitudes,
        # which dominate the ideal ones once their own bounds are added in.
        if _zero_bound(a.noise_bound) and _zero_bound(b.noise_bound):
            bound = 0.0
        else:
            av, bv = np.abs(np.asarray(a.value)), np.abs(np.asarray(b.value))
            na, nb = np.asarray(a.noise_bound), np.asarray(b.noise_bound)
            bound = (av + na) * nb + (bv + nb) * na + na * nb
        sigma = self.params.noise_per_mul
        if sigma > 0.0:
            shape = np.asarray(v).shape
            fresh = self._rng.normal(0.0, sigma, shape if shape else None)
            fresh = np.clip(fresh, -_CLIP_SIGMAS * sigma, _CLIP_SIGMAS * sigma)
            v = _as_value(np.asarray(v) + fresh)
            bound = bound + _CLIP_SIGMAS * sigma
        out = Ciphertext(v, lvl - 1, _as_value(bound))
        self._count("mul", out.width)
        return out

    def mul_plain(self, a: Ciphertext, k) -> Ciphertext:
        lvl = a.level
        if self.params.plain_mul_consumes_level:
            if lvl < 1:
                raise DepthExhausted(
                    f"plaintext multiply at level {lvl}: no multiplicative levels left"
                )
            lvl -= 1
        kv = _as_value(k)
        v = _join(a.value, kv, np.multiply)
        nb = _join(a.noise_bound, np.abs(np.asarray(kv)), np.multiply)
        out = Ciphertext(v, lvl, nb)
        self._count("mul_plain", out.width)
        return out


def gather(ct: Ciphertext, index) -> Ciphertext:
    """Select lanes out of a batched ciphertext.

    Rearranging a collection of independent ciphertexts is bookkeeping, not a
    homomorphic operation: no level is consumed and nothing is counted.
    """
    v = _as_value(np.asarray(ct.value)[index])
    nb = ct.noise_bound
    if isinstance(nb, np.ndarray):
        nb = _as_value(nb[index])
    return Ciphertext(v, ct.level, nb)
