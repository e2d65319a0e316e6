from __future__ import annotations

import pytest

from privrec.catalog import Catalog, Product, PurchaseHistory

SENSITIVE_CATEGORY = "Health & Personal Care"
PLAIN_CATEGORIES = ("Home & Kitchen", "Sports & Outdoors", "Toys & Games")


def make_product(
    pid: str,
    category: str = PLAIN_CATEGORIES[0],
    title: str | None = None,
    features: tuple[str, ...] = (),
    description: tuple[str, ...] = (),
    sensitive: bool | None = None,
    score: float | None = None,
) -> Product:
    return Product(
        id=pid,
        main_category=category,
        title=title if title is not None else f"{category} item {pid}",
        features=features,
        description=description or (f"description of {pid} in {category}",),
        ground_truth_sensitive=sensitive,
        sensitivity_score=score,
    )


def make_catalog(products) -> Catalog:
    by_id = {p.id: p for p in products}
    return Catalog(
        products=by_id,
        category_universe=tuple(sorted({p.main_category for p in products})),
    )


def make_history(user_id: str, items, target) -> PurchaseHistory:
    return PurchaseHistory(user_id=user_id, items=tuple(items), target=target)


@pytest.fixture
def mixed_catalog() -> Catalog:
    """Twelve products over four categories; health items carry labels."""
    products = []
    for i in range(4):
        products.append(
            make_product(
                f"h{i:02d}",
                SENSITIVE_CATEGORY,
                title=f"glucose monitor kit model {i}",
                sensitive=True,
                score=0.8 + 0.05 * i,
            )
        )
    for j, category in enumerate(PLAIN_CATEGORIES):
        for i in range(3 if j < 2 else 2):
            products.append(
                make_product(
                    f"p{j}{i}",
                    category,
                    sensitive=False,
                    score=0.1,
                )
            )
    return make_catalog(products)


@pytest.fixture
def mixed_history(mixed_catalog) -> PurchaseHistory:
    items = [mixed_catalog.products[pid] for pid in sorted(mixed_catalog.products) if pid != "p21"]
    return make_history("u001", items, mixed_catalog.products["p21"])
