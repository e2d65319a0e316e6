"""Product catalog ingestion and purchase-history construction.

Metadata arrives as JSON lines (one product per line), interactions as
JSON lines of {user_id, item_id, timestamp}.  Both are turned into an
archive holding the catalog, the category universe and the windowed
purchase histories used by the experiment pipeline.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import ConfigError, IngestError

__all__ = [
    "Product",
    "PurchaseHistory",
    "Catalog",
    "canonical_text",
    "ingest_metadata",
    "load_interactions",
    "build_histories",
    "save_archive",
    "load_archive",
    "archive_hash",
]

log = logging.getLogger(__name__)

DEFAULT_MIN_ITEMS = 30
DEFAULT_WINDOW = 20


@dataclass(frozen=True)
class Product:
    id: str
    main_category: str = ""
    title: str = ""
    features: tuple[str, ...] = ()
    description: tuple[str, ...] = ()
    details: Mapping[str, str] = field(default_factory=dict)
    ground_truth_sensitive: bool | None = None
    sensitivity_score: float | None = None

    def __post_init__(self):
        if self.sensitivity_score is not None and not (0.0 <= self.sensitivity_score <= 1.0):
            raise ValueError(f"sensitivity_score outside [0, 1]: {self.sensitivity_score}")


@dataclass(frozen=True)
class PurchaseHistory:
    user_id: str
    items: tuple[Product, ...]
    target: Product


@dataclass
class Catalog:
    products: dict[str, Product]
    category_universe: tuple[str, ...]
    skipped_count: int = 0
    duplicate_count: int = 0

    def __len__(self) -> int:
        return len(self.products)

    def __iter__(self) -> Iterator[Product]:
        return iter(self.products.values())


def canonical_text(product: Product) -> str:
    """Render the fixed text form used for prompts, embeddings and hashing.

    Field order is fixed (title, main category, features, description)
    and every section keeps its name prefix even when empty, so the
    output is unambiguous and byte-stable for identical field values.
    """
    return "\n".join(
        [
            f"Title: {product.title}",
            f"Main Category: {product.main_category}",
            f"Features: {'; '.join(product.features)}",
            f"Description: {' '.join(product.description)}",
        ]
    )


def _as_string_tuple(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,) if value.strip() else ()
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value if str(v).strip())
    raise ValueError(f"expected string or list, got {type(value).__name__}")


def _product_from_record(record: dict) -> Product:
    title = record.get("title")
    if not isinstance(title, str) or not title.strip():
        raise ValueError("record has no usable title")
    main_category = record.get("main_category") or ""
    if not isinstance(main_category, str):
        raise ValueError("main_category is not a string")
    features = _as_string_tuple(record.get("features"))
    description = _as_string_tuple(record.get("description"))
    details = record.get("details") or {}
    if not isinstance(details, dict):
        raise ValueError("details is not a map")
    details = {str(k): str(v) for k, v in details.items()}

    ground_truth = record.get("ground_truth_sensitive")
    if ground_truth is not None and not isinstance(ground_truth, bool):
        raise ValueError("ground_truth_sensitive is not a boolean")
    score = record.get("sensitivity_score")
    if score is not None:
        score = float(score)

    product = Product(
        id=str(record.get("parent_asin") or ""),
        main_category=main_category.strip(),
        title=title.strip(),
        features=features,
        description=description,
        details=details,
        ground_truth_sensitive=ground_truth,
        sensitivity_score=score,
    )
    if not product.id:
        # No stable identifier in the record: derive one from the text
        # itself so re-ingesting the same line yields the same id.
        digest = hashlib.sha256(canonical_text(product).encode("utf-8")).hexdigest()
        product = Product(
            id=digest,
            main_category=product.main_category,
            title=product.title,
            features=product.features,
            description=product.description,
            details=product.details,
            ground_truth_sensitive=product.ground_truth_sensitive,
            sensitivity_score=product.sensitivity_score,
        )
    return product


def _iter_lines(source) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt", encoding="utf-8") as handle:
            yield from handle
        return
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        for raw in source:
            yield raw.decode("utf-8") if isinstance(raw, bytes) else raw
        return
    yield from source


def ingest_metadata(source, limit: int | None = None) -> Catalog:
    """Parse a JSONL metadata stream into a Catalog.

    Malformed lines (broken JSON, missing title, bad field types) are
    counted and skipped, never fatal.  Duplicate ids keep the first
    occurrence.  An input with zero usable records raises IngestError.
    """
    products: dict[str, Product] = {}
    skipped = 0
    duplicates = 0
    for line in _iter_lines(source):
        if limit is not None and len(products) >= limit:
            break
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError("line is not an object")
            product = _product_from_record(record)
        except (ValueError, TypeError) as exc:
            skipped += 1
            log.debug("skipping malformed metadata line: %s", exc)
            continue
        if product.id in products:
            duplicates += 1
            continue
        products[product.id] = product

    if not products:
        raise IngestError("metadata stream produced no usable products")

    universe = tuple(sorted({p.main_category for p in products.values()}))
    log.info(
        "ingested %d products (%d skipped, %d duplicates), %d categories",
        len(products), skipped, duplicates, len(universe),
    )
    return Catalog(
        products=products,
        category_universe=universe,
        skipped_count=skipped,
        duplicate_count=duplicates,
    )


def load_interactions(source) -> dict[str, list[str]]:
    """Read {user_id, item_id, timestamp} lines into per-user id sequences.

    Events are ordered by timestamp per user; ties keep input order so
    the result is stable for a fixed input file.  Malformed lines are
    skipped with a debug log, mirroring metadata ingestion.
    """
    events: dict[str, list[tuple[float, int, str]]] = {}
    skipped = 0
    for seq, line in enumerate(_iter_lines(source)):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            user_id = str(record["user_id"])
            item_id = str(record["item_id"])
            timestamp = float(record["timestamp"])
        except (ValueError, TypeError, KeyError):
            skipped += 1
            continue
        events.setdefault(user_id, []).append((timestamp, seq, item_id))

    if skipped:
        log.info("skipped %d malformed interaction lines", skipped)
    ordered: dict[str, list[str]] = {}
    for user_id in sorted(events):
        ordered[user_id] = [item for _, _, item in sorted(events[user_id])]
    return ordered


def build_histories(
    interactions: Mapping[str, Iterable[str]],
    catalog: Catalog,
    min_items: int = DEFAULT_MIN_ITEMS,
    window: int = DEFAULT_WINDOW,
) -> list[PurchaseHistory]:
    """Window each qualifying user's interaction tail into items + target.

    A user qualifies with at least min_items interactions that resolve
    against the catalog.  The last window+1 resolvable interactions
    become the history: the first window of them are the items, the
    final one is the held-out target.
    """
    if window < 1:
        raise ConfigError(f"window must be positive, got {window}")
    if min_items < 1:
        raise ConfigError(f"min_items must be positive, got {min_items}")
    if window >= min_items:
        raise ConfigError(
            f"window ({window}) must be smaller than min_items ({min_items}); "
            "the target is held out beyond the window"
        )

    histories = []
    dropped = 0
    for user_id in sorted(interactions):
        resolved = []
        for item_id in interactions[user_id]:
            product = catalog.products.get(str(item_id))
            if product is None:
                dropped += 1
            else:
                resolved.append(product)
        if len(resolved) < min_items:
            continue
        tail = resolved[-(window + 1):]
        histories.append(
            PurchaseHistory(user_id=user_id, items=tuple(tail[:-1]), target=tail[-1])
        )

    if dropped:
        log.info("dropped %d interactions with ids missing from the catalog", dropped)
    return histories


def _product_to_dict(product: Product) -> dict:
    return {
        "id": product.id,
        "main_category": product.main_category,
        "title": product.title,
        "features": list(product.features),
        "description": list(product.description),
        "details": dict(product.details),
        "ground_truth_sensitive": product.ground_truth_sensitive,
        "sensitivity_score": product.sensitivity_score,
    }


def _product_from_dict(data: dict) -> Product:
    return Product(
        id=data["id"],
        main_category=data.get("main_category", ""),
        title=data.get("title", ""),
        features=tuple(data.get("features", ())),
        description=tuple(data.get("description", ())),
        details=dict(data.get("details", {})),
        ground_truth_sensitive=data.get("ground_truth_sensitive"),
        sensitivity_score=data.get("sensitivity_score"),
    )


def save_archive(path, catalog: Catalog, histories: Iterable[PurchaseHistory] = ()) -> None:
    """Write catalog + histories as one deterministic JSON archive.

    Keys are sorted and separators fixed so identical inputs produce
    identical bytes; the archive hash is then meaningful in manifests.
    A .gz suffix enables transparent compression.
    """
    histories = list(histories)
    payload = {
        "format": "privrec-catalog",
        "version": 1,
        "skipped_count": catalog.skipped_count,
        "duplicate_count": catalog.duplicate_count,
        "category_universe": list(catalog.category_universe),
        "products": [
            _product_to_dict(catalog.products[pid]) for pid in sorted(catalog.products)
        ],
        "histories": [
            {
                "user_id": h.user_id,
                "item_ids": [p.id for p in h.items],
                "target_id": h.target.id,
            }
            for h in sorted(histories, key=lambda h: h.user_id)
        ],
    }
    data = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    if path.suffix == ".gz":
        # mtime pinned so gzip output stays byte-stable.
        with open(path, "wb") as handle:
            with gzip.GzipFile(fileobj=handle, mode="wb", mtime=0) as gz:
                gz.write(data)
    else:
        path.write_bytes(data)


def load_archive(path) -> tuple[Catalog, list[PurchaseHistory]]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as handle:
        payload = json.load(handle)
    if payload.get("format") != "privrec-catalog":
        raise IngestError(f"{path} is not a catalog archive")
    if payload.get("version") != 1:
        raise IngestError(f"unsupported catalog archive version: {payload.get('version')}")

    products = {d["id"]: _product_from_dict(d) for d in payload["products"]}
    catalog = Catalog(
        products=products,
        category_universe=tuple(payload["category_universe"]),
        skipped_count=payload.get("skipped_count", 0),
        duplicate_count=payload.get("duplicate_count", 0),
    )
    histories = []
    for h in payload.get("histories", []):
        try:
            items = tuple(products[i] for i in h["item_ids"])
            target = products[h["target_id"]]
        except KeyError as exc:
            raise IngestError(f"history {h.get('user_id')} references unknown product {exc}")
        histories.append(PurchaseHistory(user_id=h["user_id"], items=items, target=target))
    return catalog, histories


def archive_hash(path) -> str:
    """Hex digest of the archive bytes, quoted in run manifests."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
