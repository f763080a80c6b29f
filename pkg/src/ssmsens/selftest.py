"""Identity and property checks behind ``ssmsens selftest``.

Each check returns ``(passed, detail)``; :func:`run_selftest` prints one
PASS/FAIL line per check.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import metrics as M
from .metrics import KLDirection
from .numerics import softmax
from .quantizer import INT4, INT8, channel_scales, fake_quantize
from .sensitivity import kendall_tau

CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {}


def check(name: str):
    def deco(fn):
        CHECKS[name] = fn
        return fn

    return deco


def random_logit_pairs(seed: int = 0, n: int = 100, t: int = 16, v: int = 32, noise: float = 0.5):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        teacher = rng.standard_normal((t, v)) * 2.0
        yield teacher, teacher + noise * rng.standard_normal((t, v))


@check("cross-entropy split: CE = H(p) + KL(p||q)")
def check_ce_split() -> tuple[bool, str]:
    worst = 0.0
    for zt, zs in random_logit_pairs():
        gap = M.analytic_cross_entropy(zt, zs) - M.mean_entropy(zt) - M.kl_divergence(zt, zs)
        worst = max(worst, abs(gap))
    return worst <= 1e-10, f"max |gap| = {worst:.3e}"


@check("PPL factorization and teacher-relative bound")
def check_ppl_factorization() -> tuple[bool, str]:
    worst = 0.0
    bound_ok = True
    for zt, zs in random_logit_pairs():
        kl = M.kl_divergence(zt, zs)
        ppl_q = M.perplexity(M.analytic_cross_entropy(zt, zs))
        ppl_p = M.perplexity(M.mean_entropy(zt))
        worst = max(worst, abs(ppl_q - ppl_p * math.exp(kl)) / ppl_q)
        for eps in (kl, kl * 1.5, kl + 0.1):
            bound_ok &= ppl_q <= ppl_p * math.exp(eps) * (1 + 1e-12)
    return worst <= 1e-9 and bound_ok, f"max rel err = {worst:.3e}, bound {'holds' if bound_ok else 'violated'}"


@check("constant shift: PPL/KL invariant, SQNR strictly decreasing")
def check_constant_shift() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    z = rng.standard_normal((16, 32))
    base_ppl = M.perplexity(M.mean_entropy(z))
    drift = 0.0
    sqnrs = []
    for c in (1.0, 10.0, 100.0, 1000.0):
        zh = z + c
        drift = max(
            drift,
            abs(M.perplexity(M.analytic_cross_entropy(z, zh)) - base_ppl),
            abs(M.kl_divergence(z, zh, KLDirection.TEACHER_TO_STUDENT)),
            abs(M.kl_divergence(z, zh, KLDirection.STUDENT_TO_TEACHER)),
        )
        sqnrs.append(M.sqnr_db(z, zh))
    decreasing = all(a > b for a, b in zip(sqnrs, sqnrs[1:]))
    return drift <= 1e-10 and decreasing, f"drift = {drift:.3e}, SQNR dB = {[round(s, 2) for s in sqnrs]}"


@check("Gibbs: KL >= 0, zero iff equal")
def check_gibbs() -> tuple[bool, str]:
    lo = min(
        min(M.kl_divergence(a, b, d) for d in KLDirection) for a, b in random_logit_pairs(seed=2, n=50)
    )
    z = np.random.default_rng(3).standard_normal((4, 8))
    zero = max(M.kl_divergence(z, z, d) for d in KLDirection)
    return lo > 0 and abs(zero) <= 1e-12, f"min KL = {lo:.3e}, self KL = {zero:.1e}"


@check("Kendall tau units")
def check_kendall() -> tuple[bool, str]:
    a = list(range(6))
    ok = kendall_tau(a, a).tau == 1.0 and kendall_tau(a, a[::-1]).tau == -1.0
    ok &= kendall_tau([0, 1, 2, 3], [0, 2, 1, 3]).tau == 4 / 6
    return ok, "tau(a,a)=1, tau(a,rev a)=-1, 4-element example = 2/3"


@check("fake quantization properties")
def check_quantizer() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    w = rng.standard_normal((200, 24)) * rng.uniform(0.01, 10, (200, 1))
    ok = True
    for spec in (INT4, INT8):
        q = fake_quantize(w, spec)
        ok &= np.array_equal(fake_quantize(q, spec), q)
        ok &= bool(np.all(np.abs(w - q) <= channel_scales(w, spec)[:, None] / 2))
    ok &= bool(np.all(np.abs(w - fake_quantize(w, INT8)).max(1) <= np.abs(w - fake_quantize(w, INT4)).max(1)))
    return ok, "idempotence, half-step bound, INT8 <= INT4 error"


@check("softmax shift invariance")
def check_shift_invariance() -> tuple[bool, str]:
    z = np.random.default_rng(5).standard_normal((8, 16))
    err = max(float(np.abs(softmax(z + c) - softmax(z)).max()) for c in (1.0, 1000.0, -1000.0))
    return err <= 1e-12, f"max diff = {err:.1e}"


def run_selftest(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # report, keep going
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return all_ok
