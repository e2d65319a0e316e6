"""Experiment schemes and the hybrid recommendation flow.

A scheme decides how a purchase history is split and which legs run:

  baseline        full history to the server, no scoring
  only_local      full history to the local model, no scoring
  *_obf_only      scorer splits; nonsensitive share to the server only
  *_obf_deobf     scorer splits; server and local legs run concurrently

The cat_ prefix pairs with the categorical scorer, the bert_ prefix
with a trained or remote scorer.  Sensitive items never enter a
server-bound payload on any scheme except baseline; that property is
structural here (the server prompt is built from the nonsensitive
partition only) and asserted again by the test suite.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .catalog import Catalog, PurchaseHistory, canonical_text
from .errors import BackendError, ConfigError, MetricError, ParseError, PrivRecError, RunFailure
from .gateway import (
    RecEntry,
    RecommendationSet,
    load_template,
    make_backend,
    parse_numbered_list,
    render_prompt,
)
from .retrieval import HashEmbeddingProvider, RemoteEmbeddingProvider, VectorIndex, nearest
from .sensitivity import build_scorer, split_history

__all__ = [
    "SCHEMES",
    "Allocation",
    "allocate",
    "timing_extra",
    "ExperimentConfig",
    "UserRunRecord",
    "ExperimentResult",
    "Experiment",
    "write_run_archive",
    "load_run",
]

log = logging.getLogger(__name__)

SCHEMES = (
    "baseline",
    "only_local",
    "cat_obf_only",
    "cat_obf_deobf",
    "bert_obf_only",
    "bert_obf_deobf",
)

_SCORED_SCHEMES = ("cat_obf_only", "cat_obf_deobf", "bert_obf_only", "bert_obf_deobf")
_LOCAL_SCHEMES = ("only_local", "cat_obf_deobf", "bert_obf_deobf")
_SERVER_SCHEMES = ("baseline", "cat_obf_only", "cat_obf_deobf", "bert_obf_only", "bert_obf_deobf")


@dataclass(frozen=True)
class Allocation:
    n_ns: int
    n_s: int


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def allocate(n_total: int, count_s: int, count_ns: int) -> Allocation:
    """Split the recommendation budget proportionally to the partition.

    n_s rounds half up from n_total * count_s / (count_s + count_ns),
    with a floor of one slot whenever any sensitive item exists, so a
    sensitive purchase always influences at least one recommendation.
    """
    if n_total < 1:
        raise ConfigError(f"n_total must be positive, got {n_total}")
    if count_s < 0 or count_ns < 0:
        raise ConfigError(f"negative partition counts: ({count_s}, {count_ns})")
    if count_s + count_ns < 1:
        raise ConfigError("cannot allocate over an empty history")
    n_s = _round_half_up(n_total * count_s / (count_s + count_ns))
    if count_s > 0 and n_s == 0:
        n_s = 1
    return Allocation(n_ns=n_total - n_s, n_s=n_s)


def timing_extra(t_obf: float, t_rec: float, t_deobf: float) -> float:
    """Added end-to-end latency when the legs overlap.

    The server leg runs regardless, so the extra cost is the scoring
    time plus however much the slower leg overhangs the server leg:
    t_obf + max(t_rec, t_deobf) - t_rec.
    """
    if min(t_obf, t_rec, t_deobf) < 0:
        raise MetricError(f"negative durations: ({t_obf}, {t_rec}, {t_deobf})")
    return t_obf + max(t_rec, t_deobf) - t_rec


_CONFIG_KEYS = {
    "scheme",
    "n_total",
    "scorer",
    "server_backend",
    "local_backend",
    "embedding",
    "seed",
    "parallelism",
    "failure_cap",
    "user_query",
}


@dataclass
class ExperimentConfig:
    scheme: str
    n_total: int = 10
    scorer: dict | None = None
    server_backend: dict | None = None
    local_backend: dict | None = None
    embedding: dict = field(default_factory=lambda: {"kind": "hash", "dimension": 384})
    seed: int = 0
    parallelism: int = 4
    failure_cap: float = 0.05
    user_query: str | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.n_total < 1:
            raise ConfigError(f"n_total must be positive, got {self.n_total}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be positive, got {self.parallelism}")
        if not (0.0 <= self.failure_cap <= 1.0):
            raise ConfigError(f"failure_cap must lie in [0, 1], got {self.failure_cap}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        if "scheme" not in data:
            raise ConfigError("run config is missing the scheme")
        kwargs = dict(data)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "n_total": self.n_total,
            "scorer": self.scorer,
            "server_backend": self.server_backend,
            "local_backend": self.local_backend,
            "embedding": self.embedding,
            "seed": self.seed,
            "parallelism": self.parallelism,
            "failure_cap": self.failure_cap,
            "user_query": self.user_query,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class UserRunRecord:
    user_id: str
    scheme: str
    status: str = "ok"
    error_category: str | None = None
    verdicts: list = field(default_factory=list)
    allocation: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)
    recommendations: list = field(default_factory=list)
    resolved: list = field(default_factory=list)
    shortfall: dict = field(default_factory=dict)
    leakage: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    duplicate_recommendations: int = 0
    # Raw prompts and responses; written to the audit stream, never to records.
    audit: dict | None = None

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "scheme": self.scheme,
            "status": self.status,
            "error_category": self.error_category,
            "verdicts": self.verdicts,
            "allocation": self.allocation,
            "target": self.target,
            "recommendations": self.recommendations,
            "resolved": self.resolved,
            "shortfall": self.shortfall,
            "leakage": self.leakage,
            "timings": self.timings,
            "duplicate_recommendations": self.duplicate_recommendations,
        }


@dataclass
class ExperimentResult:
    records: list[UserRunRecord]
    manifest: dict
    summary: dict

    @property
    def ok_records(self) -> list[UserRunRecord]:
        return [r for r in self.records if r.status == "ok"]


class Experiment:
    """One configured scheme bound to its scorer, backends and index.

    Backends and the scorer may be passed as ready objects (tests) or
    left to be built from the config mappings (CLI).  The index and
    embedding provider are always required: every scheme resolves its
    recommendation texts back to catalog products.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        catalog: Catalog,
        index: VectorIndex,
        provider=None,
        scorer=None,
        server_backend=None,
        local_backend=None,
    ):
        self.config = config
        self.catalog = catalog
        self.index = index
        self.provider = provider or self._build_provider(config.embedding, index)

        scheme = config.scheme
        self.scorer = scorer
        if scheme in _SCORED_SCHEMES:
            if self.scorer is None:
                if not config.scorer:
                    raise ConfigError(f"scheme {scheme} requires a scorer")
                self.scorer = build_scorer(config.scorer)
            kind = getattr(self.scorer, "kind", None)
            if scheme.startswith("cat_") and kind != "categorical":
                raise ConfigError(f"scheme {scheme} requires the categorical scorer, got {kind!r}")
            if scheme.startswith("bert_") and kind not in ("trained", "remote"):
                raise ConfigError(f"scheme {scheme} requires a trained or remote scorer, got {kind!r}")
        elif self.scorer is not None or config.scorer:
            raise ConfigError(f"scheme {scheme} does not take a scorer")

        def wire(cfg_dict, given, leg):
            if given is not None:
                return given
            if not cfg_dict:
                raise ConfigError(f"scheme {scheme} requires a {leg} backend")
            return make_backend(cfg_dict, catalog=catalog, index=index, provider=self.provider)

        self.server_backend = (
            wire(config.server_backend, server_backend, "server")
            if scheme in _SERVER_SCHEMES
            else None
        )
        self.local_backend = (
            wire(config.local_backend, local_backend, "local")
            if scheme in _LOCAL_SCHEMES
            else None
        )
        for backend in (self.server_backend, self.local_backend):
            if backend is not None and config.n_total > backend.max_output_items:
                raise ConfigError(
                    f"n_total {config.n_total} exceeds backend max_output_items "
                    f"{backend.max_output_items}"
                )

        self.server_template = load_template("server_recommend")
        self.local_template = load_template("local_recommend")

    @staticmethod
    def _build_provider(embedding: dict, index: VectorIndex):
        kind = (embedding or {}).get("kind", "hash")
        if kind == "hash":
            return HashEmbeddingProvider(dimension=embedding.get("dimension", index.dimension))
        if kind == "remote":
            return RemoteEmbeddingProvider(
                base_url=embedding.get("base_url", ""),
                dimension=embedding.get("dimension", index.dimension),
                timeout=float(embedding.get("timeout", 30.0)),
            )
        raise ConfigError(f"unknown embedding provider kind: {kind!r}")

    # -- per-user flow ---------------------------------------------------

    def _leg(self, backend, template, count: int, texts: list[str], provenance: str) -> RecommendationSet:
        system, user = render_prompt(template, count, texts)
        if self.config.user_query:
            user = f"{self.config.user_query}\n\n{user}"
        result = backend.complete(system, user)
        entries, shortfall = parse_numbered_list(result.text, count)
        rec_set = RecommendationSet(
            entries=[RecEntry(rank=i, text=t) for i, t in enumerate(entries, 1)],
            provenance=provenance,
            shortfall=shortfall,
            latency_seconds=result.latency_seconds,
            raw_response=result.text,
        )
        rec_set.prompt = (system, user)  # carried to the audit stream
        return rec_set

    def run_user(self, history: PurchaseHistory) -> UserRunRecord:
        cfg = self.config
        scheme = cfg.scheme
        items = list(history.items)
        if not items:
            raise ConfigError(f"user {history.user_id} has an empty history")

        verdicts = []
        t_obf = 0.0
        if scheme == "baseline":
            p_s: list = []
            p_ns = items
            alloc = Allocation(n_ns=cfg.n_total, n_s=0)
        elif scheme == "only_local":
            p_s = items
            p_ns = []
            alloc = Allocation(n_ns=0, n_s=cfg.n_total)
        else:
            started = time.perf_counter()
            p_s, p_ns, verdicts = split_history(history, self.scorer)
            t_obf = time.perf_counter() - started
            alloc = allocate(cfg.n_total, len(p_s), len(p_ns))

        run_local = scheme in _LOCAL_SCHEMES
        server_count = alloc.n_ns if (self.server_backend is not None and p_ns) else 0
        local_count = alloc.n_s if (run_local and p_s) else 0
        # Slots allocated to sensitive items with no local model to fill them.
        unfilled_local = alloc.n_s if (not run_local and alloc.n_s > 0) else 0

        server_set: RecommendationSet | None = None
        local_set: RecommendationSet | None = None
        if server_count > 0 and local_count > 0:
            with ThreadPoolExecutor(max_workers=2) as pool:
                server_future = pool.submit(
                    self._leg, self.server_backend, self.server_template,
                    server_count, [canonical_text(p) for p in p_ns], "server",
                )
                local_future = pool.submit(
                    self._leg, self.local_backend, self.local_template,
                    local_count, [canonical_text(p) for p in p_s], "local",
                )
                server_error = local_error = None
                try:
                    server_set = server_future.result()
                except PrivRecError as exc:
                    server_error = exc
                try:
                    local_set = local_future.result()
                except PrivRecError as exc:
                    local_error = exc
                if server_error is not None:
                    raise server_error
                if local_error is not None:
                    raise local_error
        elif server_count > 0:
            server_set = self._leg(
                self.server_backend, self.server_template,
                server_count, [canonical_text(p) for p in p_ns], "server",
            )
        elif local_count > 0:
            local_set = self._leg(
                self.local_backend, self.local_template,
                local_count, [canonical_text(p) for p in p_s], "local",
            )

        merged: list[dict] = []
        for rec_set in (server_set, local_set):
            if rec_set is None:
                continue
            for entry in rec_set.entries:
                merged.append(
                    {"rank": len(merged) + 1, "text": entry.text, "provenance": rec_set.provenance}
                )

        texts = [m["text"] for m in merged]
        resolved: list[dict | None] = []
        if texts:
            vectors = self.provider.embed(texts)
            for row in range(len(texts)):
                norm = float((vectors[row] ** 2).sum())
                if norm == 0.0:
                    resolved.append(None)
                    continue
                pid, category, similarity = nearest(self.index, vectors[row], 1)[0]
                resolved.append(
                    {"product_id": pid, "main_category": category, "similarity": similarity}
                )

        server_sent = server_count > 0
        shared_ids = {p.id for p in p_ns} if server_sent else set()
        leakage = [
            {"product_id": p.id, "shared": p.id in shared_ids, "score": p.sensitivity_score}
            for p in items
            if p.ground_truth_sensitive is True
        ]

        t_rec = server_set.latency_seconds if server_set else 0.0
        t_deobf = local_set.latency_seconds if local_set else 0.0
        shortfall_server = server_set.shortfall if server_set else (server_count or 0)
        shortfall_local = local_set.shortfall if local_set else (local_count or 0)

        def leg_audit(rec_set):
            if rec_set is None:
                return None
            system, user = rec_set.prompt
            return {"system": system, "user": user, "raw_response": rec_set.raw_response}

        return UserRunRecord(
            user_id=history.user_id,
            scheme=scheme,
            verdicts=[
                {"product_id": v.product_id, "probability": v.probability, "is_sensitive": v.is_sensitive}
                for v in verdicts
            ],
            allocation={"n_ns": alloc.n_ns, "n_s": alloc.n_s},
            target={
                "product_id": history.target.id,
                "main_category": history.target.main_category,
                "text": canonical_text(history.target),
            },
            recommendations=merged,
            resolved=resolved,
            shortfall={
                "server": shortfall_server,
                "local": shortfall_local,
                "unfilled_local_slots": unfilled_local,
                "total": shortfall_server + shortfall_local + unfilled_local,
            },
            leakage=leakage,
            timings={
                "t_obf": t_obf,
                "t_rec": t_rec,
                "t_deobf": t_deobf,
                "t_total_extra": timing_extra(t_obf, t_rec, t_deobf),
            },
            duplicate_recommendations=len(texts) - len(set(texts)),
            audit={
                "user_id": history.user_id,
                "server": leg_audit(server_set),
                "local": leg_audit(local_set),
            },
        )

    # -- whole-run flow ----------------------------------------------------

    def run(
        self,
        histories: Sequence[PurchaseHistory],
        catalog_hash: str = "",
        index_hash: str = "",
    ) -> ExperimentResult:
        """Run every user, bounded by config.parallelism.

        Per-user failures are isolated into failed records; the run as
        a whole raises RunFailure (with the partial result attached)
        only when the failure ratio exceeds the configured cap.
        """
        if not histories:
            raise ConfigError("cannot run an experiment over zero users")
        ordered = sorted(histories, key=lambda h: h.user_id)
        if len({h.user_id for h in ordered}) != len(ordered):
            raise ConfigError("duplicate user ids in history set")

        started = time.perf_counter()

        def one(history: PurchaseHistory) -> UserRunRecord:
            try:
                return self.run_user(history)
            except BackendError as exc:
                log.warning("user %s failed: %s", history.user_id, exc)
                return UserRunRecord(
                    user_id=history.user_id, scheme=self.config.scheme,
                    status="failed", error_category=exc.category,
                )
            except ParseError as exc:
                log.warning("user %s failed: %s", history.user_id, exc)
                return UserRunRecord(
                    user_id=history.user_id, scheme=self.config.scheme,
                    status="failed", error_category="parse",
                )

        if self.config.parallelism == 1:
            records = [one(h) for h in ordered]
        else:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                records = list(pool.map(one, ordered))
        records.sort(key=lambda r: r.user_id)
        wall = time.perf_counter() - started

        n_failed = sum(1 for r in records if r.status != "ok")
        config_hash = self.config.config_hash()
        manifest = {
            "format": "privrec-run",
            "version": 1,
            "run_id": f"{self.config.scheme}-{config_hash[:12]}",
            "scheme": self.config.scheme,
            "n_total": self.config.n_total,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "config_hash": config_hash,
            "backends": {
                "server": self.server_backend.identity() if self.server_backend else None,
                "local": self.local_backend.identity() if self.local_backend else None,
                "scorer": self.scorer.identity() if self.scorer else None,
                "embedding": self.provider.identity(),
            },
            "catalog_hash": catalog_hash,
            "index_hash": index_hash,
            "category_universe": list(self.catalog.category_universe),
            "n_users": len(records),
            "n_failed": n_failed,
            "failure_cap": self.config.failure_cap,
            "audit_contains_sensitive_payloads": True,
        }

        ok = [r for r in records if r.status == "ok"]

        def mean(key: str) -> float:
            return sum(r.timings[key] for r in ok) / len(ok) if ok else 0.0

        summary = {
            "run_id": manifest["run_id"],
            "n_users": len(records),
            "n_ok": len(ok),
            "n_failed": n_failed,
            "wall_seconds": wall,
            "mean_t_obf": mean("t_obf"),
            "mean_t_rec": mean("t_rec"),
            "mean_t_deobf": mean("t_deobf"),
            "mean_t_total_extra": mean("t_total_extra"),
            "total_shortfall": sum(r.shortfall.get("total", 0) for r in ok),
            "total_duplicate_recommendations": sum(r.duplicate_recommendations for r in ok),
        }
        result = ExperimentResult(records=records, manifest=manifest, summary=summary)

        if len(records) and n_failed / len(records) > self.config.failure_cap:
            failure = RunFailure(
                f"{n_failed}/{len(records)} users failed, above the "
                f"{self.config.failure_cap:.0%} cap"
            )
            failure.result = result
            raise failure
        return result


def write_run_archive(out_dir, result: ExperimentResult) -> Path:
    """Persist manifest, records, audit payloads and the timing summary.

    Raw prompts and responses can contain sensitive product text, so
    they go to the local audit stream only and the manifest says so;
    records.jsonl carries no prompt bodies.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(
        json.dumps(result.manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    with open(out / "records.jsonl", "w", encoding="utf-8") as handle:
        for record in result.records:
            handle.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    with open(out / "audit.jsonl", "w", encoding="utf-8") as handle:
        for record in result.records:
            if record.audit is not None:
                handle.write(json.dumps(record.audit, sort_keys=True) + "\n")
    (out / "summary.json").write_text(
        json.dumps(result.summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return out


@dataclass
class LoadedRun:
    manifest: dict
    records: list[dict]

    @property
    def run_id(self) -> str:
        return self.manifest["run_id"]

    @property
    def scheme(self) -> str:
        return self.manifest["scheme"]


def load_run(run_dir) -> LoadedRun:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{run_dir} is not a run archive (missing manifest.json)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "privrec-run":
        raise ConfigError(f"{run_dir} is not a run archive")
    records = []
    with open(run_dir / "records.jsonl", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return LoadedRun(manifest=manifest, records=records)
