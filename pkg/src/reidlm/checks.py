"""Invariant suites behind the ``gradcheck`` and ``selftest`` commands.

Every check returns a :class:`CheckResult` carrying the measured value and
the threshold it was held to, so callers can report numbers rather than
just pass/fail.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .evaluation import EmbeddingMatrix, Protocol, brute_force_oracle, evaluate
from .losses import TripletConfig, id_loss, lm_nll, overall_loss, pairwise_distance, triplet_loss

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | None = None
    threshold: float | None = None
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        val = "" if self.value is None else f" value={self.value:.3g}"
        thr = "" if self.threshold is None else f" threshold={self.threshold:.3g}"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}{val}{thr}{extra} [{self.seconds:.1f}s]"


def _t(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), trainable=True)


def _w(rng, shape):
    return rng.normal(size=shape)


# ---------------------------------------------------------------------------
# gradient-check catalogue: name -> rng -> (inputs, scalar function)


def _brute_triplet(x: np.ndarray, labels: np.ndarray, margin: float) -> float:
    """Per-anchor enumeration of every (positive, negative) pair."""
    n = len(x)
    total = 0.0
    for a in range(n):
        hardest_pos, hardest_neg = -math.inf, math.inf
        for j in range(n):
            d = math.sqrt(sum((x[a, k] - x[j, k]) ** 2 for k in range(x.shape[1])))
            if labels[j] == labels[a]:
                hardest_pos = max(hardest_pos, d)
            else:
                hardest_neg = min(hardest_neg, d)
        total += max(0.0, margin + hardest_pos - hardest_neg)
    return total


def _op_cases():
    tril = np.tril(np.ones((4, 4), bool))
    return {
        "add": lambda r: ([_t(_w(r, (3, 4))), _t(_w(r, (4,)))],
                          lambda a, b, W=_w(r, (3, 4)): ad.tsum(ad.add(a, b) * W)),
        "sub": lambda r: ([_t(_w(r, (3, 4))), _t(_w(r, (3, 1)))],
                          lambda a, b, W=_w(r, (3, 4)): ad.tsum(ad.sub(a, b) * W)),
        "mul": lambda r: ([_t(_w(r, (2, 3))), _t(_w(r, (2, 3)))], lambda a, b: ad.tsum(a * b * a)),
        "div": lambda r: ([_t(_w(r, (2, 3))), _t(np.abs(_w(r, (2, 3))) + 1.0)], lambda a, b: ad.tsum(a / b)),
        "neg": lambda r: ([_t(_w(r, (4,)))], lambda a, W=_w(r, (4,)): ad.tsum(ad.neg(a) * W)),
        "power": lambda r: ([_t(np.abs(_w(r, (5,))) + 0.5)], lambda a: ad.tsum(ad.power(a, 3) + ad.power(a, 0.5))),
        "exp": lambda r: ([_t(_w(r, (5,)))], lambda a: ad.tsum(ad.exp(a * 0.7))),
        "log": lambda r: ([_t(np.abs(_w(r, (5,))) + 0.5)], lambda a: ad.tsum(ad.log(a))),
        "sqrt": lambda r: ([_t(np.abs(_w(r, (5,))) + 0.5)], lambda a: ad.tsum(ad.sqrt(a))),
        "relu": lambda r: ([_t(_w(r, (6,)))], lambda a, W=_w(r, (6,)): ad.tsum(ad.relu(a) * W)),
        "gelu": lambda r: ([_t(_w(r, (6,)))], lambda a, W=_w(r, (6,)): ad.tsum(ad.gelu(a) * W)),
        "tanh": lambda r: ([_t(_w(r, (6,)))], lambda a, W=_w(r, (6,)): ad.tsum(ad.tanh(a) * W)),
        "sum_mean": lambda r: ([_t(_w(r, (3, 4)))],
                               lambda a: ad.tsum(ad.tsum(a * a, axis=0) * 0.3) + ad.mean(a * a * a)),
        "reshape_transpose": lambda r: ([_t(_w(r, (2, 3, 4)))],
                                        lambda a, W=_w(r, (4, 6)): ad.tsum(
                                            ad.reshape(ad.transpose(a, (2, 0, 1)), (4, 6)) * W)),
        "concat_index": lambda r: ([_t(_w(r, (2, 3))), _t(_w(r, (1, 3)))],
                                   lambda a, b: ad.tsum(ad.index(ad.concat([a, b], 0), ([0, 2, 2], [1, 0, 0])) ** 2)),
        "embedding": lambda r: ([_t(_w(r, (6, 3)))],
                                lambda e, W=_w(r, (2, 4, 3)): ad.tsum(
                                    ad.embedding(e, np.array([[0, 1, 1, 5], [2, 2, 3, 0]])) * W)),
        "gather_scatter": lambda r: ([_t(_w(r, (2, 5, 3))), _t(_w(r, (2, 2, 3)))],
                                     lambda x, v, W=_w(r, (2, 5, 3)): ad.tsum(
                                         ad.scatter_positions(x, np.array([[1, 2], [0, 4]]), v) * W)
                                     + ad.tsum(ad.gather_positions(x, np.array([[3, 3], [1, 2]])) ** 2)),
        "masked_max_min": lambda r: ([_t(_w(r, (4, 4)))],
                                     lambda a, m=r.random((4, 4)) < 0.6: ad.tsum(
                                         ad.masked_max(a, m | np.eye(4, dtype=bool), 1)
                                         + ad.masked_min(a, ~m | np.eye(4, dtype=bool), 1) * 2.0)),
        "hinge": lambda r: ([_t(_w(r, (8,)))], lambda a, W=_w(r, (8,)): ad.tsum(ad.hinge(a + 0.1) * W)),
        "matmul": lambda r: ([_t(_w(r, (2, 3, 4))), _t(_w(r, (4, 2)))],
                             lambda a, b, W=_w(r, (2, 3, 2)): ad.tsum(ad.matmul(a, b) * W)),
        "softmax": lambda r: ([_t(_w(r, (2, 4, 4)))],
                              lambda a, W=_w(r, (2, 4, 4)): ad.tsum(ad.softmax(a, -1, tril) * W)),
        "log_softmax": lambda r: ([_t(_w(r, (3, 5)))],
                                  lambda a, W=_w(r, (3, 5)): ad.tsum(ad.log_softmax(a) * W)),
        "softmax_cross_entropy": lambda r: ([_t(_w(r, (4, 7)))],
                                            lambda a: ad.softmax_cross_entropy(a, [0, 6, 3, 3], [1, 0.5, 0, 2])),
        "layer_norm": lambda r: ([_t(_w(r, (2, 3, 8))), _t(_w(r, (8,))), _t(_w(r, (8,)))],
                                 lambda x, g, b, W=_w(r, (2, 3, 8)): ad.tsum(ad.layer_norm(x, g, b) * W)),
    }


def _loss_cases():
    def lm_case(r):
        ids = r.integers(0, 11, size=(2, 6))
        mask = np.zeros((2, 6))
        mask[:, 3:] = 1
        return [_t(_w(r, (2, 6, 11)))], lambda z: lm_nll(z, ids, mask)

    def id_case(r):
        labels = r.integers(0, 5, size=8)
        return [_t(_w(r, (8, 5)))], lambda z: id_loss(z, labels)

    def tri_case(distance, reduction):
        def make(r):
            labels = np.repeat(np.arange(3), 3)
            cfg = TripletConfig(0.3, distance, reduction)
            return [_t(_w(r, (9, 4)))], lambda x: triplet_loss(x, labels, cfg)
        return make

    def overall_case(r):
        ids = r.integers(0, 7, size=(4, 5))
        mask = np.ones((4, 5))
        labels = np.array([0, 0, 1, 1])

        def f(z, h, e):
            return overall_loss(lm_nll(z, ids, mask), id_loss(h, labels), triplet_loss(e, labels), 0.3)
        return [_t(_w(r, (4, 5, 7))), _t(_w(r, (4, 2))), _t(_w(r, (4, 3)))], f

    def pairwise_case(r):
        return [_t(_w(r, (5, 3)))], lambda x, W=_w(r, (5, 5)) * (1 - np.eye(5)): ad.tsum(pairwise_distance(x) * W)

    return {
        "lm_nll": lm_case,
        "id_loss": id_case,
        "triplet_euclidean_mean": tri_case("euclidean", "mean"),
        "triplet_euclidean_sum": tri_case("euclidean", "sum"),
        "triplet_cosine": tri_case("cosine", "mean"),
        "pairwise_distance": pairwise_case,
        "overall_loss": overall_case,
    }


def _model_case(r):
    """Encoder -> projection -> LM -> pooled latents -> identity + triplet,
    differentiated with respect to the raw image pixels."""
    from .models import (CausalLMConfig, VisualEncoderConfig, build_models, encode_image, lm_forward,
                         pool_image_latents, project)

    enc = VisualEncoderConfig(height=8, width=8, patch=4, dim=8, layers=1, heads=2)
    lmc = CausalLMConfig(vocab_size=9, dim=8, layers=1, heads=2, max_len=12)
    ms = build_models("mllmreid_pretrain", enc, lmc, 2, int(r.integers(1 << 30)))
    ids = np.array([[1, 4, 4, 4, 4, 5, 6, 2]] * 4)
    slots = np.tile(np.arange(1, 5), (4, 1))
    mask = np.zeros(ids.shape)
    mask[:, 5:] = 1
    labels = np.array([0, 0, 1, 1])

    def f(img):
        tokens = project(encode_image(img, ms.encoder), ms.projection)
        logits, hidden = lm_forward(ms.lm, ids, slots, tokens)
        pooled = pool_image_latents(hidden, slots)
        return overall_loss(lm_nll(logits, ids, mask), id_loss(ms.id_head(pooled), labels),
                            triplet_loss(pooled, labels), 0.3)
    return [_t(r.random((4, 8, 8, 3)))], f


def gradcheck_cases() -> dict[str, Callable]:
    cases = {f"op:{k}": v for k, v in _op_cases().items()}
    cases.update({f"loss:{k}": v for k, v in _loss_cases().items()})
    cases["model:pipeline"] = _model_case
    return cases


def run_gradchecks(seeds: int = 10, tol: float = GRAD_TOL, names: list[str] | None = None,
                   max_elements: int = 60) -> list[CheckResult]:
    results = []
    for name, make in gradcheck_cases().items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([seed, 7])
            inputs, f = make(rng)
            worst = max(worst, grad_check(f, inputs, eps=1e-5, max_elements=max_elements, rng=rng))
        results.append(CheckResult(f"gradcheck {name}", worst <= tol, worst, tol, f"{seeds} seeds",
                                   time.perf_counter() - t0))
    return results


# ---------------------------------------------------------------------------
# closed forms and oracles


def check_closed_forms() -> list[CheckResult]:
    out = []
    C = 13
    v = id_loss(Tensor(np.zeros((5, C))), np.arange(5)).item()
    out.append(CheckResult("uniform-logit id_loss = ln C", abs(v - math.log(C)) <= 1e-9,
                           abs(v - math.log(C)), 1e-9))
    P, K, m = 2, 2, 0.3
    v = triplet_loss(Tensor(np.ones((P * K, 6))), np.repeat(np.arange(P), K),
                     TripletConfig(m, reduction="sum")).item()
    out.append(CheckResult("identical-embedding triplet sum = P*K*m", v == P * K * m, abs(v - P * K * m), 0.0))
    V = 17
    v = lm_nll(Tensor(np.zeros((2, V))), np.array([1, 3]), np.array([0, 1])).item()
    out.append(CheckResult("uniform single-token lm_nll = ln V", abs(v - math.log(V)) <= 1e-9,
                           abs(v - math.log(V)), 1e-9))
    a, b, c = 1.7, 0.4, 2.9
    ok = overall_loss(a, b, c, 1.0) == a and overall_loss(a, b, c, 0.0) == b + c
    out.append(CheckResult("overall_loss boundaries at lambda 0 and 1", ok))
    err = abs(overall_loss(a, b, c, 0.3) - (0.3 * a + 0.7 * (b + c)))
    out.append(CheckResult("overall_loss at lambda 0.3", err <= 1e-12, err, 1e-12))
    return out


def check_triplet_oracle(batches: int = 100, tol: float = 1e-10) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(batches):
        x = rng.normal(size=(16, 8))
        labels = np.repeat(np.arange(4), 4)
        got = triplet_loss(Tensor(x), labels, TripletConfig(0.3, reduction="sum")).item()
        worst = max(worst, abs(got - _brute_triplet(x, labels, 0.3)))
    return CheckResult("batch-hard triplet = brute force (P=4,K=4,d=8)", worst <= tol, worst, tol,
                       f"{batches} batches", time.perf_counter() - t0)


def random_retrieval_instance(rng: np.random.Generator, nq: int = 100, ng: int = 500, ids: int = 20,
                              cams: int = 4, dim: int = 8):
    q = EmbeddingMatrix(rng.normal(size=(nq, dim)), rng.integers(0, ids, nq), rng.integers(0, cams, nq))
    g = EmbeddingMatrix(rng.normal(size=(ng, dim)), rng.integers(0, ids, ng), rng.integers(0, cams, ng))
    return q, g


def check_metric_oracle(instances: int = 50, tol: float = 1e-9) -> list[CheckResult]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(instances):
        q, g = random_retrieval_instance(rng)
        a, b = evaluate(q, g), brute_force_oracle(q, g)
        worst = max(worst, abs(a.mAP - b.mAP), abs(a.rank1 - b.rank1),
                    float(np.max(np.abs(np.asarray(a.cmc) - np.asarray(b.cmc)))))
    out = [CheckResult("evaluate = brute-force oracle (100x500, 20 ids, 4 cams)", worst <= tol, worst, tol,
                       f"{instances} instances", time.perf_counter() - t0)]
    pids = np.repeat(np.arange(10), 4)
    cams = np.tile(np.arange(4), 10)
    onehot = np.eye(10)[pids]
    r = evaluate(EmbeddingMatrix(onehot[::4], pids[::4], cams[::4]), EmbeddingMatrix(onehot, pids, (cams + 1) % 4))
    out.append(CheckResult("perfect embeddings give mAP = R1 = 1", r.mAP == 1.0 and r.rank1 == 1.0))
    q = EmbeddingMatrix(np.zeros((1, 1)), [1], [0])
    g = EmbeddingMatrix(np.array([[1.0], [2.0], [3.0], [4.0]]), [1, 2, 1, 3], [1, 1, 1, 1])
    ap = evaluate(q, g).mAP
    out.append(CheckResult("relevant at ranks 1 and 3 gives AP 5/6", abs(ap - 5 / 6) <= 1e-12,
                           abs(ap - 5 / 6), 1e-12))
    return out


def check_syncreid_liveness() -> CheckResult:
    """Stage-1 batch with the LM term weighted to zero: the encoder must still
    receive gradient through the pooled LM latents."""
    from .models import build_models, encode_image, lm_forward, pool_image_latents, project, \
        VisualEncoderConfig, CausalLMConfig

    rng = np.random.default_rng(5)
    enc = VisualEncoderConfig(height=16, width=8, patch=4, dim=16, layers=2, heads=2)
    lmc = CausalLMConfig(vocab_size=12, dim=16, layers=1, heads=2, max_len=20)
    ms = build_models("mllmreid_pretrain", enc, lmc, 3, 0)
    n_img = enc.num_patches
    ids = np.concatenate([[1], np.full(n_img, 4), [7, 8, 2]])[None].repeat(6, 0)
    slots = np.tile(np.arange(1, 1 + n_img), (6, 1))
    labels = np.repeat(np.arange(3), 2)
    mask = np.zeros(ids.shape)
    mask[:, -2:] = 1
    ad.get_tape().clear()
    tokens = project(encode_image(rng.random((6, 16, 8, 3)), ms.encoder), ms.projection)
    logits, hidden = lm_forward(ms.lm, ids, slots, tokens)
    pooled = pool_image_latents(hidden, slots)
    lm = lm_nll(logits, ids, mask)
    total = 0.0 * lm + 0.7 * (id_loss(ms.id_head(pooled), labels) + triplet_loss(pooled, labels))
    ad.backward(total)
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in ms.encoder.active_parameters()
                         if p.grad is not None))
    for p in ms.modules().values():
        p.zero_grad()
    return CheckResult("identity/triplet path alone reaches the visual encoder", norm > 0, norm, 0.0)


def check_data_contracts() -> list[CheckResult]:
    from .synthdata import ATTRIBUTE_SPACE, REFERENCE_STATS, IdentitySpec, gen_caption, gen_continuation, \
        word_count

    t0 = time.perf_counter()
    m = REFERENCE_STATS["Market1501"]
    row = tuple(m[k] for k in ("ID_q", "ID_g", "ID_t", "IMG_q", "IMG_g", "IMG_t", "CAM_n"))
    out = [CheckResult("Market1501 reference row", row == (750, 750, 751, 3368, 19732, 12936, 6), detail=str(row))]
    longest = 0
    for i, attrs in enumerate(ATTRIBUTE_SPACE):
        longest = max(longest, word_count(gen_continuation(gen_caption(IdentitySpec(i, *attrs)))))
    out.append(CheckResult("every continuation < 20 words", longest < 20, longest, 20,
                           f"{len(ATTRIBUTE_SPACE)} attribute tuples", time.perf_counter() - t0))
    return out


def selftest() -> list[CheckResult]:
    results = run_gradchecks(seeds=10)
    results += check_closed_forms()
    results.append(check_triplet_oracle())
    results += check_metric_oracle()
    results.append(check_syncreid_liveness())
    results += check_data_contracts()
    return results
