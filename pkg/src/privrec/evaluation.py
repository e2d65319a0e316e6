"""Run evaluation: hit rates, distribution distances, privacy leakage.

Functions here consume the plain-dict records that runs serialize
(records.jsonl), so a report can be assembled from archives alone.
Distribution vectors are always expressed over the fixed category
universe recorded in the run manifest; pooled distances are the
headline numbers, per-user means are labeled separately.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, MetricError
from .pipeline import SCHEMES, LoadedRun
from .retrieval import cosine

__all__ = [
    "CategoryDistribution",
    "distribution",
    "l1_distance",
    "l2_distance",
    "per_group_distances",
    "recovery",
    "PrivacyLeakage",
    "privacy_leakage",
    "hr10_exact",
    "hr10_category",
    "hr10_semantic",
    "pooled_categories",
    "leakage_from_records",
    "MetricBundle",
    "build_bundle",
    "write_report",
    "provider_from_identity",
]

log = logging.getLogger(__name__)

TOP_K = 10


@dataclass(frozen=True)
class CategoryDistribution:
    universe: tuple[str, ...]
    proportions: tuple[float, ...]
    total: int

    @property
    def flagged_empty(self) -> bool:
        return self.total == 0


def distribution(categories: Iterable[str], universe: Sequence[str]) -> CategoryDistribution:
    """Proportion vector over the fixed universe.

    Zero observations yield the all-zero vector with the empty flag
    set rather than an error; any category outside the universe is a
    hard error because two such vectors would not be comparable.
    """
    universe = tuple(universe)
    if not universe:
        raise MetricError("category universe is empty")
    position = {name: i for i, name in enumerate(universe)}
    counts = [0] * len(universe)
    total = 0
    for name in categories:
        if name not in position:
            raise MetricError(f"category {name!r} is outside the universe")
        counts[position[name]] += 1
        total += 1
    if total == 0:
        return CategoryDistribution(universe=universe, proportions=(0.0,) * len(universe), total=0)
    return CategoryDistribution(
        universe=universe,
        proportions=tuple(c / total for c in counts),
        total=total,
    )


def _paired(a: CategoryDistribution, b: CategoryDistribution) -> np.ndarray:
    if a.universe != b.universe:
        raise MetricError("distributions are over different category universes")
    return np.asarray(a.proportions) - np.asarray(b.proportions)


def l1_distance(a: CategoryDistribution, b: CategoryDistribution) -> float:
    return float(np.abs(_paired(a, b)).sum())


def l2_distance(a: CategoryDistribution, b: CategoryDistribution) -> float:
    return float(np.sqrt((_paired(a, b) ** 2).sum()))


def per_group_distances(
    base: CategoryDistribution,
    system: CategoryDistribution,
    sensitive_categories: Iterable[str],
) -> dict:
    """Size-normalized distances inside the sensitive / nonsensitive groups.

    avg_l1 is the mean absolute component difference over the group,
    avg_l2 the root of the mean squared difference, so groups of
    different sizes stay comparable.
    """
    delta = _paired(base, system)
    sensitive = frozenset(sensitive_categories)
    unknown = sensitive - set(base.universe)
    if unknown:
        raise MetricError(f"sensitive categories outside the universe: {sorted(unknown)}")
    groups: dict[str, list[int]] = {"sensitive": [], "nonsensitive": []}
    for i, name in enumerate(base.universe):
        groups["sensitive" if name in sensitive else "nonsensitive"].append(i)
    out = {}
    for name, indices in groups.items():
        if not indices:
            raise MetricError(f"the {name} category group is empty")
        part = delta[indices]
        out[name] = {
            "avg_l1": float(np.abs(part).mean()),
            "avg_l2": float(np.sqrt((part**2).mean())),
            "size": len(indices),
        }
    return out


def recovery(distance_obf_only: float, distance_obf_deobf: float) -> float:
    """How much of the obfuscation-induced distance deobfuscation wins
    back, as a percentage of the obfuscation-only distance."""
    if distance_obf_only <= 0.0:
        raise MetricError(
            f"recovery undefined for obfuscation-only distance {distance_obf_only}"
        )
    return 100.0 * (distance_obf_only - distance_obf_deobf) / distance_obf_only


@dataclass(frozen=True)
class PrivacyLeakage:
    pl_b: float
    pl_s: float | None  # None when no usable scores exist


def privacy_leakage(
    shared_flags: Sequence[bool], scores: Sequence[float | None] | None = None
) -> PrivacyLeakage:
    """Binary and score-weighted leakage over ground-truth-sensitive items.

    An empty flag list means the metric does not apply; that is an
    error rather than a zero, because zero claims perfect privacy.
    Items without scores drop out of pl_s only.
    """
    flags = list(shared_flags)
    if not flags:
        raise MetricError("privacy leakage is not applicable without sensitive products")
    pl_b = sum(1 for f in flags if f) / len(flags)
    if scores is None:
        return PrivacyLeakage(pl_b=pl_b, pl_s=None)
    if len(scores) != len(flags):
        raise MetricError(f"{len(flags)} flags but {len(scores)} scores")
    pairs = [(f, s) for f, s in zip(flags, scores) if s is not None]
    mass = sum(s for _, s in pairs)
    if not pairs or mass == 0.0:
        return PrivacyLeakage(pl_b=pl_b, pl_s=None)
    return PrivacyLeakage(pl_b=pl_b, pl_s=sum(s for f, s in pairs if f) / mass)


def _ok(records: Iterable[Mapping]) -> list[Mapping]:
    return [r for r in records if r.get("status") == "ok"]


def _top_resolved(record: Mapping) -> list[Mapping]:
    resolved = record.get("resolved") or []
    return [r for r in resolved[:TOP_K] if r is not None]


def hr10_exact(records: Iterable[Mapping]) -> float:
    """Fraction of users whose held-out product appears in the top 10."""
    ok = _ok(records)
    if not ok:
        return 0.0
    hits = sum(
        1
        for r in ok
        if any(res["product_id"] == r["target"]["product_id"] for res in _top_resolved(r))
    )
    return hits / len(ok)


def hr10_category(records: Iterable[Mapping]) -> float:
    """Fraction of users with the target's category in the top 10.

    A user with no resolvable recommendations is a miss, never skipped.
    """
    ok = _ok(records)
    if not ok:
        return 0.0
    hits = sum(
        1
        for r in ok
        if any(res["main_category"] == r["target"]["main_category"] for res in _top_resolved(r))
    )
    return hits / len(ok)


def hr10_semantic(records: Iterable[Mapping], provider) -> float:
    """Mean over users of the best cosine between target and top-10 texts.

    Users with no recommendations score 0 (that is an outcome); users
    whose texts all embed to zero vectors are excluded as measurement
    failures and counted in the log.
    """
    ok = _ok(records)
    if not ok:
        return 0.0
    scores: list[float] = []
    excluded = 0
    for record in ok:
        texts = [m["text"] for m in (record.get("recommendations") or [])[:TOP_K]]
        if not texts:
            scores.append(0.0)
            continue
        vectors = provider.embed([record["target"]["text"]] + texts)
        target_vec = vectors[0]
        if float(np.linalg.norm(target_vec)) == 0.0:
            excluded += 1
            continue
        best = None
        for row in range(1, len(texts) + 1):
            if float(np.linalg.norm(vectors[row])) == 0.0:
                continue
            value = cosine(target_vec, vectors[row])
            best = value if best is None else max(best, value)
        if best is None:
            excluded += 1
            continue
        scores.append(best)
    if excluded:
        log.warning("hr10_semantic excluded %d users with zero-vector embeddings", excluded)
    return sum(scores) / len(scores) if scores else 0.0


def pooled_categories(records: Iterable[Mapping]) -> list[str]:
    """Resolved categories of every recommendation across ok users."""
    out: list[str] = []
    for record in _ok(records):
        for res in record.get("resolved") or []:
            if res is not None:
                out.append(res["main_category"])
    return out


def leakage_from_records(
    records: Iterable[Mapping],
) -> tuple[list[bool], list[float | None]]:
    flags: list[bool] = []
    scores: list[float | None] = []
    for record in _ok(records):
        for item in record.get("leakage") or []:
            flags.append(bool(item["shared"]))
            scores.append(item.get("score"))
    return flags, scores


@dataclass
class MetricBundle:
    run_id: str
    scheme: str
    n_users: int
    n_ok: int
    hr10_exact: float
    hr10_category: float
    hr10_semantic: float
    l1: float
    l2: float
    l1_user_mean: float
    l2_user_mean: float
    per_group: dict | None
    pl_b: float | None
    pl_s: float | None
    pl_applicable: bool
    score_mean: float | None
    score_std: float | None
    leaked_score_mean: float | None
    duplicate_recommendations: int
    shortfall_total: int
    empty_distribution: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_bundle(
    run: LoadedRun,
    baseline_pool: CategoryDistribution,
    universe: Sequence[str],
    provider,
    sensitive_categories: Sequence[str] | None,
) -> MetricBundle:
    records = run.records
    ok = _ok(records)
    pool = distribution(pooled_categories(records), universe)

    per_user_l1: list[float] = []
    per_user_l2: list[float] = []
    for record in ok:
        cats = [res["main_category"] for res in record.get("resolved") or [] if res is not None]
        user_dist = distribution(cats, universe)
        per_user_l1.append(l1_distance(user_dist, baseline_pool))
        per_user_l2.append(l2_distance(user_dist, baseline_pool))

    flags, scores = leakage_from_records(records)
    if flags:
        leak = privacy_leakage(flags, scores)
        pl_b, pl_s, applicable = leak.pl_b, leak.pl_s, True
    else:
        pl_b, pl_s, applicable = None, None, False

    known_scores = [s for s in scores if s is not None]
    leaked_scores = [s for f, s in zip(flags, scores) if f and s is not None]
    per_group = None
    if sensitive_categories:
        per_group = per_group_distances(baseline_pool, pool, sensitive_categories)

    return MetricBundle(
        run_id=run.run_id,
        scheme=run.scheme,
        n_users=len(records),
        n_ok=len(ok),
        hr10_exact=hr10_exact(records),
        hr10_category=hr10_category(records),
        hr10_semantic=hr10_semantic(records, provider),
        l1=l1_distance(pool, baseline_pool),
        l2=l2_distance(pool, baseline_pool),
        l1_user_mean=sum(per_user_l1) / len(per_user_l1) if per_user_l1 else 0.0,
        l2_user_mean=sum(per_user_l2) / len(per_user_l2) if per_user_l2 else 0.0,
        per_group=per_group,
        pl_b=pl_b,
        pl_s=pl_s,
        pl_applicable=applicable,
        score_mean=float(np.mean(known_scores)) if known_scores else None,
        score_std=float(np.std(known_scores)) if known_scores else None,
        leaked_score_mean=float(np.mean(leaked_scores)) if leaked_scores else None,
        duplicate_recommendations=sum(
            r.get("duplicate_recommendations", 0) for r in ok
        ),
        shortfall_total=sum((r.get("shortfall") or {}).get("total", 0) for r in ok),
        empty_distribution=pool.flagged_empty,
    )


def provider_from_identity(identity: Mapping):
    """Rebuild the embedding provider a run was executed with."""
    from .retrieval import HashEmbeddingProvider, RemoteEmbeddingProvider

    kind = identity.get("kind")
    if kind == "hash":
        return HashEmbeddingProvider(dimension=int(identity.get("dimension", 384)))
    if kind == "remote":
        return RemoteEmbeddingProvider(
            base_url=identity.get("base_url", ""),
            dimension=int(identity.get("dimension", 384)),
        )
    raise ConfigError(f"unknown embedding identity kind: {kind!r}")


def _scheme_order(bundle: MetricBundle) -> tuple[int, str]:
    try:
        return (SCHEMES.index(bundle.scheme), bundle.run_id)
    except ValueError:
        return (len(SCHEMES), bundle.run_id)


def _fmt(value: float | None, percent: bool = False) -> str:
    if value is None:
        return "n/a"
    if percent:
        return f"{100.0 * value:.4f}%"
    return f"{value:.4f}"


_RECOVERY_PAIRS = (
    ("cat", "cat_obf_only", "cat_obf_deobf"),
    ("bert", "bert_obf_only", "bert_obf_deobf"),
)


def write_report(
    runs: Sequence[LoadedRun],
    baseline_id: str,
    out_dir,
    provider=None,
    sensitive_categories: Sequence[str] | None = None,
) -> tuple[Path, Path]:
    """Assemble metric bundles and write report.json plus report.txt.

    The baseline run anchors every distance; all runs must share the
    baseline's catalog hash and category universe.  Output contains no
    wall-clock values, so identical inputs produce identical bytes.
    """
    if not runs:
        raise ConfigError("no runs to report on")
    by_id = {run.run_id: run for run in runs}
    if len(by_id) != len(runs):
        raise ConfigError("duplicate run ids in report input")
    baseline = by_id.get(baseline_id)
    if baseline is None:
        matches = [run for run in runs if run.scheme == baseline_id]
        if len(matches) == 1:
            baseline = matches[0]
        else:
            raise ConfigError(f"baseline run {baseline_id!r} not found among {sorted(by_id)}")

    universe = tuple(baseline.manifest.get("category_universe") or ())
    if not universe:
        raise MetricError("baseline manifest carries no category universe")
    anchor_hash = baseline.manifest.get("catalog_hash", "")
    for run in runs:
        if tuple(run.manifest.get("category_universe") or ()) != universe:
            raise MetricError(f"run {run.run_id} uses a different category universe")
        run_hash = run.manifest.get("catalog_hash", "")
        if anchor_hash and run_hash and run_hash != anchor_hash:
            raise MetricError(f"run {run.run_id} was produced against a different catalog")

    if provider is None:
        provider = provider_from_identity(
            (baseline.manifest.get("backends") or {}).get("embedding") or {"kind": "hash"}
        )
    if sensitive_categories is None:
        for run in runs:
            scorer = (run.manifest.get("backends") or {}).get("scorer") or {}
            if scorer.get("kind") == "categorical":
                sensitive_categories = scorer.get("sensitive_categories")
                break

    baseline_pool = distribution(pooled_categories(baseline.records), universe)
    bundles = sorted(
        (
            build_bundle(run, baseline_pool, universe, provider, sensitive_categories)
            for run in runs
        ),
        key=_scheme_order,
    )
    # Baseline leads regardless of scheme-name ordering.
    bundles.sort(key=lambda b: 0 if b.run_id == baseline.run_id else 1)

    scheme_to_bundle = {b.scheme: b for b in bundles}
    recovery_rows = {}
    for label, only_scheme, deobf_scheme in _RECOVERY_PAIRS:
        if only_scheme in scheme_to_bundle and deobf_scheme in scheme_to_bundle:
            obf = scheme_to_bundle[only_scheme]
            deobf = scheme_to_bundle[deobf_scheme]
            if obf.l1 > 0.0 and obf.l2 > 0.0:
                recovery_rows[label] = {
                    "l1_pct": recovery(obf.l1, deobf.l1),
                    "l2_pct": recovery(obf.l2, deobf.l2),
                }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "format": "privrec-report",
        "version": 1,
        "baseline": baseline.run_id,
        "category_universe": list(universe),
        "sensitive_categories": sorted(sensitive_categories) if sensitive_categories else None,
        "distance_basis": "pooled (user means labeled *_user_mean)",
        "runs": {
            run.run_id: {
                "scheme": run.scheme,
                "config_hash": run.manifest.get("config_hash"),
                "catalog_hash": run.manifest.get("catalog_hash"),
                "seed": run.manifest.get("seed"),
            }
            for run in runs
        },
        "schemes": [b.to_dict() for b in bundles],
        "recovery": recovery_rows,
    }
    json_path = out / "report.json"
    json_path.write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    txt_path = out / "report.txt"
    txt_path.write_text(_render_table(bundles, recovery_rows, baseline.run_id), encoding="utf-8")
    return json_path, txt_path


def _render_table(bundles: Sequence[MetricBundle], recovery_rows: dict, baseline_id: str) -> str:
    headers = [
        "Scheme",
        "CatHR@10",
        "SemHR@10",
        "L2",
        "L1",
        "PLb",
        "PLs",
        "NS-AvgL2",
        "NS-AvgL1",
        "S-AvgL2",
        "S-AvgL1",
    ]
    rows = []
    for b in bundles:
        group = b.per_group or {}
        ns = group.get("nonsensitive") or {}
        sens = group.get("sensitive") or {}
        rows.append(
            [
                b.scheme,
                _fmt(b.hr10_category),
                _fmt(b.hr10_semantic),
                _fmt(b.l2),
                _fmt(b.l1),
                _fmt(b.pl_b, percent=True),
                _fmt(b.pl_s, percent=True),
                _fmt(ns.get("avg_l2")),
                _fmt(ns.get("avg_l1")),
                _fmt(sens.get("avg_l2")),
                _fmt(sens.get("avg_l1")),
            ]
        )
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]

    def line(cells):
        return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(cells)).rstrip()

    parts = [line(headers), line(["-" * w for w in widths])]
    parts.extend(line(r) for r in rows)
    parts.append("")
    parts.append(f"baseline: {baseline_id}")
    parts.append("")
    parts.append("Exact HR@10")
    for b in bundles:
        parts.append(f"  {b.scheme}: {_fmt(b.hr10_exact)}")
    if recovery_rows:
        parts.append("")
        parts.append("Distance recovered by deobfuscation (obf-only vs obf+deobf)")
        for label, values in sorted(recovery_rows.items()):
            parts.append(
                f"  {label}: L2 {values['l2_pct']:.4f}%  L1 {values['l1_pct']:.4f}%"
            )
    parts.append("")
    parts.append("Duplicate recommendations per run")
    for b in bundles:
        parts.append(f"  {b.scheme}: {b.duplicate_recommendations}")
    stats = [b for b in bundles if b.score_mean is not None]
    if stats:
        parts.append("")
        parts.append("Sensitivity score statistics (ground-truth-sensitive items)")
        for b in stats:
            leaked = _fmt(b.leaked_score_mean)
            parts.append(
                f"  {b.scheme}: mean {b.score_mean:.4f}  std {b.score_std:.4f}  "
                f"leaked-mean {leaked}"
            )
    parts.append("")
    return "\n".join(parts)
