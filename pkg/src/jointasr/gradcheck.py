"""Central finite-difference checks for every differentiable op and both end-to-end losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import ContrastiveConfig, contrastive_loss, ctc_loss
from .model import AcousticModel, plan_from_starts, tiny_preset
from .tensor import Tensor

ELEMENTARY_TOL = 1e-5
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn`` w.r.t. entries of ``x`` (perturbed in place).

    Returns (flat indices checked, gradient estimates).
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return idx, out


def check_fn(name: str, build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray], tol: float,
             h: float = 1e-5, max_entries: int | None = None) -> CheckResult:
    """Compare backward() gradients of ``build(inputs)`` with central differences for each input."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    build(leaves).backward()
    worst = 0.0
    for leaf in leaves:
        def f(leaf=leaf):
            return build([Tensor(l.data) for l in leaves]).item()
        idx, num = numeric_grad(f, leaf.data, h, max_entries)
        worst = max(worst, rel_err(leaf.grad.reshape(-1)[idx], num))
    return CheckResult(name, worst, tol)


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(t, Tensor(w)))


def op_suites(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)
    res = []
    w34 = r(3, 4)
    res.append(check_fn("matmul", lambda a: T.sum_all(T.matmul(a[0], a[1])), [r(3, 5), r(5, 4)], ELEMENTARY_TOL))
    wb = r(2, 3, 2)
    res.append(check_fn("matmul_batched", lambda a: _weighted_sum(T.matmul(a[0], a[1]), wb),
                        [r(2, 3, 4), r(2, 4, 2)], ELEMENTARY_TOL))
    wc = r(3, 4)
    res.append(check_fn("conv1d", lambda a: _weighted_sum(T.conv1d(a[0], a[1], a[2], stride=2), wc),
                        [r(2, 10), r(3, 2, 3), r(3)], ELEMENTARY_TOL))
    wg = r(4, 9)
    res.append(check_fn("conv1d_groups_pad", lambda a: _weighted_sum(
        T.conv1d(a[0], a[1], a[2], stride=1, groups=2, padding=2), wg), [r(4, 9), r(4, 2, 5), r(4)],
        ELEMENTARY_TOL))
    ws = r(3, 4)
    res.append(check_fn("softmax", lambda a: _weighted_sum(T.softmax(a[0]), ws), [r(3, 4)], COMPOSITE_TOL))
    res.append(check_fn("log_softmax", lambda a: _weighted_sum(T.log_softmax(a[0]), ws), [r(3, 4)],
                        COMPOSITE_TOL))
    res.append(check_fn("layer_norm", lambda a: _weighted_sum(T.layer_norm(a[0], a[1], a[2]), w34),
                        [r(3, 4), r(4), r(4)], ELEMENTARY_TOL))
    res.append(check_fn("gelu", lambda a: _weighted_sum(T.gelu(a[0]), w34), [r(3, 4)], ELEMENTARY_TOL))
    res.append(check_fn("add_bias", lambda a: _weighted_sum(T.add(a[0], a[1]), w34), [r(3, 4), r(4)],
                        ELEMENTARY_TOL))
    res.append(check_fn("mul", lambda a: T.sum_all(T.mul(a[0], a[1])), [r(3, 4), r(3, 4)], ELEMENTARY_TOL))
    res.append(check_fn("scale", lambda a: _weighted_sum(T.scale(a[0], -2.5), w34), [r(3, 4)], ELEMENTARY_TOL))
    wt = r(4, 3)
    res.append(check_fn("transpose", lambda a: _weighted_sum(T.transpose(a[0]), wt), [r(3, 4)], ELEMENTARY_TOL))
    wcat = r(5, 4)
    res.append(check_fn("concat", lambda a: _weighted_sum(T.concat([a[0], a[1]], 0), wcat), [r(3, 4), r(2, 4)],
                        ELEMENTARY_TOL))
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    we = r(2, 3, 4)
    res.append(check_fn("embedding_select", lambda a: _weighted_sum(T.embedding_select(a[0], idx), we),
                        [r(4, 4)], ELEMENTARY_TOL))
    res.append(check_fn("replace_rows", lambda a: _weighted_sum(T.replace_rows(a[0], [0, 2], a[1]), w34),
                        [r(3, 4), r(4)], ELEMENTARY_TOL))
    wcos = r(5)
    res.append(check_fn("cosine_similarity", lambda a: _weighted_sum(T.cosine_similarity(a[0], a[1]), wcos),
                        [r(5, 3), r(5, 3)], ELEMENTARY_TOL))
    tgt = np.array([0, 3, 1])
    res.append(check_fn("cross_entropy_from_logits", lambda a: T.cross_entropy_from_logits(a[0], tgt),
                        [r(3, 4)], COMPOSITE_TOL))
    wn = r(3, 2)
    res.append(check_fn("narrow", lambda a: _weighted_sum(T.narrow(a[0], 1, 1, 2), wn), [r(3, 4)],
                        ELEMENTARY_TOL))
    wr = r(2, 6)
    res.append(check_fn("reshape", lambda a: _weighted_sum(T.reshape(a[0], (2, 6)), wr), [r(3, 4)],
                        ELEMENTARY_TOL))
    drop_rng_seed = 7
    res.append(check_fn("dropout", lambda a: _weighted_sum(
        T.dropout(a[0], 0.3, np.random.default_rng(drop_rng_seed), True), w34), [r(3, 4)], ELEMENTARY_TOL))
    res.append(check_fn("ctc_loss", lambda a: ctc_loss(T.log_softmax(a[0]), [0, 1, 1], 3), [r(7, 4)],
                        COMPOSITE_TOL))
    return res


def model_suites(seed: int = 0, max_entries: int = 40) -> list[CheckResult]:
    """Both losses through the tiny model (dropout and layer drop off) against finite differences."""
    cfg = tiny_preset()
    model = AcousticModel.create(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    audio = rng.normal(size=22)  # 4 frames
    f = cfg.num_frames(audio.size)
    plan = plan_from_starts(f, [1], 2)
    ccfg = ContrastiveConfig(temperature=0.5, num_negatives=2)

    def unsup_loss():
        z = model.encode(audio)
        z_ctx = model.contextualize(model.apply_mask(z, plan))
        return contrastive_loss(z, z_ctx, plan, ccfg, np.random.default_rng(3))

    def sup_loss():
        z = model.encode(audio)
        return ctc_loss(model.classify(model.contextualize(z)), [0, 2], 28)

    results = []
    for name, fn in (("model_contrastive", unsup_loss), ("model_ctc", sup_loss)):
        model.params.clear_grad()
        fn().backward()
        worst = 0.0
        for pname, p in model.params.items():
            if p.grad is None:
                continue
            idx, num = numeric_grad(lambda: fn().item(), p.data, 1e-5, max_entries, np.random.default_rng(0))
            worst = max(worst, rel_err(p.grad.reshape(-1)[idx], num, floor=1e-4))
        results.append(CheckResult(name, worst, COMPOSITE_TOL))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_suites(seed) + model_suites(seed)
