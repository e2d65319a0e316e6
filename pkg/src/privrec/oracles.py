"""Brute-force reference implementations for the selfcheck command.

Everything here recomputes a metric the slow, obvious way: explicit
loops, no shared code with the evaluation module.  The selfcheck
command runs both paths over randomized instances and reports any
disagreement beyond 1e-12.
"""
from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import evaluation
from .gateway import parse_numbered_list
from .pipeline import allocate, timing_extra
from .retrieval import HashEmbeddingProvider, VectorIndex, nearest
from .sensitivity import class_weights, focal_loss

__all__ = ["selfcheck_run"]

_TOL = 1e-12


def naive_distribution(categories: Sequence[str], universe: Sequence[str]) -> list[float]:
    counts = []
    for name in universe:
        c = 0
        for observed in categories:
            if observed == name:
                c += 1
        counts.append(c)
    total = sum(counts)
    if total == 0:
        return [0.0 for _ in universe]
    return [c / total for c in counts]


def naive_l1(a: Sequence[float], b: Sequence[float]) -> float:
    out = 0.0
    for x, y in zip(a, b):
        out += abs(x - y)
    return out


def naive_l2(a: Sequence[float], b: Sequence[float]) -> float:
    out = 0.0
    for x, y in zip(a, b):
        out += (x - y) ** 2
    return math.sqrt(out)


def naive_group_averages(
    a: Sequence[float], b: Sequence[float], universe: Sequence[str], sensitive: set[str]
) -> dict:
    out = {}
    for name, member in (("sensitive", True), ("nonsensitive", False)):
        deltas = [
            a[i] - b[i] for i in range(len(universe)) if (universe[i] in sensitive) == member
        ]
        out[name] = {
            "avg_l1": sum(abs(d) for d in deltas) / len(deltas),
            "avg_l2": math.sqrt(sum(d * d for d in deltas) / len(deltas)),
        }
    return out


def naive_pl(flags: Sequence[bool], scores: Sequence[float | None]):
    pl_b = sum(1 for f in flags if f) / len(flags)
    numerator = denominator = 0.0
    seen = False
    for f, s in zip(flags, scores):
        if s is None:
            continue
        seen = True
        denominator += s
        if f:
            numerator += s
    pl_s = numerator / denominator if seen and denominator > 0 else None
    return pl_b, pl_s


def naive_hr_exact(records: Sequence[Mapping]) -> float:
    ok = [r for r in records if r["status"] == "ok"]
    if not ok:
        return 0.0
    hits = 0
    for r in ok:
        target = r["target"]["product_id"]
        found = False
        for res in (r["resolved"] or [])[:10]:
            if res is not None and res["product_id"] == target:
                found = True
        if found:
            hits += 1
    return hits / len(ok)


def naive_hr_category(records: Sequence[Mapping]) -> float:
    ok = [r for r in records if r["status"] == "ok"]
    if not ok:
        return 0.0
    hits = 0
    for r in ok:
        target = r["target"]["main_category"]
        found = False
        for res in (r["resolved"] or [])[:10]:
            if res is not None and res["main_category"] == target:
                found = True
        if found:
            hits += 1
    return hits / len(ok)


def naive_hr_semantic(records: Sequence[Mapping], provider) -> float:
    ok = [r for r in records if r["status"] == "ok"]
    values = []
    for r in ok:
        texts = [m["text"] for m in (r["recommendations"] or [])[:10]]
        if not texts:
            values.append(0.0)
            continue
        target_vec = provider.embed([r["target"]["text"]])[0]
        tn = math.sqrt(float(sum(v * v for v in target_vec)))
        if tn == 0.0:
            continue
        best = None
        for text in texts:
            vec = provider.embed([text])[0]
            vn = math.sqrt(float(sum(v * v for v in vec)))
            if vn == 0.0:
                continue
            sim = float(sum(x * y for x, y in zip(target_vec, vec))) / (tn * vn)
            best = sim if best is None else max(best, sim)
        if best is not None:
            values.append(best)
    return sum(values) / len(values) if values else 0.0


def naive_ranked(index: VectorIndex, query: np.ndarray) -> list[tuple[str, float]]:
    """Exhaustive cosine scan with compensated sums, best first."""
    scored = []
    qn = math.sqrt(math.fsum(float(v) * float(v) for v in query))
    for row in range(len(index.ids)):
        vec = index.vectors[row]
        vn = math.sqrt(math.fsum(float(v) * float(v) for v in vec))
        dot = math.fsum(float(x) * float(y) for x, y in zip(vec, query))
        scored.append((-(dot / (vn * qn)), index.ids[row]))
    scored.sort()
    return [(pid, -neg) for neg, pid in scored]


def topk_is_optimal(
    result: Sequence[tuple[str, float]],
    ranked: Sequence[tuple[str, float]],
    tol: float = 1e-9,
) -> bool:
    """Brute-force verdict on a top-k answer.

    The two sides reduce floating point in different orders, so sims a
    hair apart can legally swap; anything beyond tol is a real bug.
    """
    reference = dict(ranked)
    for pid, sim in result:
        if pid not in reference or abs(sim - reference[pid]) > tol:
            return False
    for (_, s1), (_, s2) in zip(result, result[1:]):
        if s2 > s1 + tol:
            return False
    chosen = {pid for pid, _ in result}
    if len(chosen) != len(result):
        return False
    worst = min(reference[pid] for pid in chosen)
    return all(
        pid in chosen or sim <= worst + tol for pid, sim in ranked
    )


def _random_records(rng: np.random.Generator, universe: Sequence[str]) -> list[dict]:
    records = []
    for u in range(int(rng.integers(3, 18))):
        if rng.random() < 0.1:
            records.append(
                {"user_id": f"u{u:03d}", "status": "failed", "error_category": "transport"}
            )
            continue
        n_rec = int(rng.integers(0, 13))
        recommendations = []
        resolved = []
        for i in range(n_rec):
            cat = universe[int(rng.integers(0, len(universe)))]
            pid = f"p{int(rng.integers(0, 60)):03d}"
            recommendations.append(
                {"rank": i + 1, "text": f"{pid} widget {cat} {int(rng.integers(0, 9))}",
                 "provenance": "server"}
            )
            if rng.random() < 0.05:
                resolved.append(None)
            else:
                resolved.append(
                    {"product_id": pid, "main_category": cat, "similarity": float(rng.random())}
                )
        leakage = []
        for i in range(int(rng.integers(0, 6))):
            leakage.append(
                {
                    "product_id": f"s{i}",
                    "shared": bool(rng.random() < 0.5),
                    "score": None if rng.random() < 0.2 else float(rng.random()),
                }
            )
        records.append(
            {
                "user_id": f"u{u:03d}",
                "status": "ok",
                "target": {
                    "product_id": f"p{int(rng.integers(0, 60)):03d}",
                    "main_category": universe[int(rng.integers(0, len(universe)))],
                    "text": f"target item {u}",
                },
                "recommendations": recommendations,
                "resolved": resolved,
                "leakage": leakage,
            }
        )
    return records


def _close(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= _TOL


def selfcheck_run(seed: int = 0, instances: int = 60) -> list[tuple[str, bool, str]]:
    """Exercise implementation-vs-oracle agreement; returns (name, ok, detail)."""
    rng = np.random.default_rng(seed)
    results: list[tuple[str, bool, str]] = []

    def check(name: str, ok: bool, detail: str = ""):
        results.append((name, ok, detail))

    universe = tuple(f"cat-{c}" for c in "abcdefgh")
    provider = HashEmbeddingProvider(dimension=64)
    worst = 0.0
    agree = True
    for _ in range(instances):
        records = _random_records(rng, universe)
        base_records = _random_records(rng, universe)
        base_naive = naive_distribution(
            [res["main_category"] for r in base_records if r["status"] == "ok"
             for res in (r["resolved"] or []) if res is not None],
            universe,
        )
        base_impl = evaluation.distribution(evaluation.pooled_categories(base_records), universe)
        sys_naive = naive_distribution(
            [res["main_category"] for r in records if r["status"] == "ok"
             for res in (r["resolved"] or []) if res is not None],
            universe,
        )
        sys_impl = evaluation.distribution(evaluation.pooled_categories(records), universe)
        pairs = [
            (evaluation.hr10_exact(records), naive_hr_exact(records)),
            (evaluation.hr10_category(records), naive_hr_category(records)),
            (evaluation.hr10_semantic(records, provider), naive_hr_semantic(records, provider)),
            (evaluation.l1_distance(sys_impl, base_impl), naive_l1(sys_naive, base_naive)),
            (evaluation.l2_distance(sys_impl, base_impl), naive_l2(sys_naive, base_naive)),
        ]
        flags, scores = evaluation.leakage_from_records(records)
        if flags:
            leak = evaluation.privacy_leakage(flags, scores)
            pl_b, pl_s = naive_pl(flags, scores)
            pairs.append((leak.pl_b, pl_b))
            if not _close(leak.pl_s, pl_s):
                agree = False
        group_impl = evaluation.per_group_distances(base_impl, sys_impl, set(universe[:3]))
        group_naive = naive_group_averages(
            base_naive, sys_naive, universe, set(universe[:3])
        )
        for name in ("sensitive", "nonsensitive"):
            pairs.append((group_impl[name]["avg_l1"], group_naive[name]["avg_l1"]))
            pairs.append((group_impl[name]["avg_l2"], group_naive[name]["avg_l2"]))
        for impl_value, naive_value in pairs:
            worst = max(worst, abs(impl_value - naive_value))
            if not _close(impl_value, naive_value):
                agree = False
    check("metrics agree with brute-force oracles", agree, f"worst delta {worst:.2e}")

    grid_ok = True
    for n_total in range(1, 21):
        for count_s in range(0, 21):
            for count_ns in (0, 1, 5, 20):
                if count_s + count_ns == 0:
                    continue
                alloc = allocate(n_total, count_s, count_ns)
                if alloc.n_ns + alloc.n_s != n_total or (alloc.n_s == 0) != (count_s == 0):
                    grid_ok = False
    check("allocation identities over the full grid", grid_ok)

    roundtrip_ok = True
    for _ in range(200):
        k = int(rng.integers(1, 12))
        texts = [
            f"item {int(rng.integers(0, 10**6))} of batch {int(rng.integers(0, 99))}"
            for _ in range(k)
        ]
        raw = "\n".join(f"{i}. {t}" for i, t in enumerate(texts, 1))
        parsed, shortfall = parse_numbered_list(raw, k)
        if parsed != texts or shortfall != 0:
            roundtrip_ok = False
    check("numbered-list parser roundtrip", roundtrip_ok)

    texts = [f"product {i} {'alpha beta gamma delta'[i % 20:]}" for i in range(40)]
    vectors = provider.embed(texts)
    idx = VectorIndex(
        dimension=provider.dimension,
        ids=[f"p{i:03d}" for i in range(40)],
        categories=["c"] * 40,
        vectors=vectors,
    )
    retrieval_ok = True
    for _ in range(20):
        query = provider.embed([texts[int(rng.integers(0, 40))] + " query"])[0]
        mine = [(pid, sim) for pid, _, sim in nearest(idx, query, 5)]
        if not topk_is_optimal(mine, naive_ranked(idx, query)):
            retrieval_ok = False
    check("top-k retrieval optimal under exhaustive scan", retrieval_ok)

    check(
        "timing identity on the reference point",
        abs(timing_extra(0.1808, 2.7428, 6.3816) - 3.8196) < _TOL,
    )
    check(
        "focal loss reference value",
        abs(focal_loss([0.5], [2.0], 2.0) - 0.34657359027997264) < 1e-9,
    )
    check(
        "class weights reference values",
        _close(class_weights(100, (75, 25))[0], 100 / 150.0)
        and _close(class_weights(100, (75, 25))[1], 2.0),
    )
    return results
