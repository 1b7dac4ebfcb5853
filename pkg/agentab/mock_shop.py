"""
mock_shop - A deterministic in-process storefront.

Implements the environment contract over a fixed product catalog, with a
control variant that shows every filter option and a treatment variant that
prunes options by their similarity to the search query. States can also be
rendered to HTML and served over HTTP, so the browser backend and its
extraction rules can be exercised against a known site.
"""

from __future__ import annotations

import html
import http.server
import json
import logging
import math
import re
import threading
import urllib.parse
import uuid
from collections import OrderedDict
from collections.abc import Callable, Iterable
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from .config import data_path, default
from .environment import (
    Action,
    ActionSpace,
    ClickFilter,
    ClickProduct,
    ExecResult,
    FilterGroup,
    FilterOption,
    Observation,
    OutOfSpaceError,
    PageType,
    ProductDetail,
    ProductSummary,
    Purchase,
    Search,
    Stop,
    action_space,
)

logger = logging.getLogger(__name__)

RESULTS_LIMIT = 10

STOPWORDS = frozenset(
    "a an and are as at be by for from in is it of on or the to with under over & -".split()
)

PRICE_BUCKETS: tuple[tuple[str, float, float], ...] = (
    ("Under $25", 0.0, 25.0),
    ("$25 to $50", 25.0, 50.0),
    ("$50 to $100", 50.0, 100.0),
    ("$100 & Above", 100.0, math.inf),
)
RATING_OPTIONS: tuple[tuple[str, float], ...] = (
    ("4 Stars & Up", 4.0),
    ("3 Stars & Up", 3.0),
)
FILTER_GROUP_ORDER = ("Brand", "Department", "Price", "Rating")


class Product(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    title: str
    brand: str
    price: float = Field(gt=0)
    rating: float = Field(ge=0, le=5)
    review_count: int = Field(ge=0)
    department: str
    attributes: dict[str, str] = {}


class Catalog(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    products: tuple[Product, ...]
    departments: tuple[str, ...]

    _by_id: dict[str, Product] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "Catalog":
        ids = [p.id for p in self.products]
        if len(ids) != len(set(ids)):
            raise ValueError("Product ids must be unique within a catalog")
        for product in self.products:
            if product.department not in self.departments:
                raise ValueError(
                    f"Product {product.id} has unknown department {product.department!r}"
                )
        return self

    def model_post_init(self, __context) -> None:
        self._by_id = {p.id: p for p in self.products}

    def __getitem__(self, product_id: str) -> Product:
        return self._by_id[product_id]

    @classmethod
    def from_products(cls, products: Iterable[Product]) -> "Catalog":
        products = tuple(products)
        departments = tuple(sorted({p.department for p in products}))
        return cls(products=products, departments=departments)


def load_catalog(path: Path | None = None) -> Catalog:
    """Read a catalog file (a JSON array of products). Defaults to the bundled one."""
    path = path or data_path("catalog.json")
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    return Catalog.from_products(Product.model_validate(x) for x in records)


def tokens(text: str) -> set[str]:
    """Lowercased word tokens, without stopwords. No stemming."""
    return {t for t in re.findall(r"[a-z0-9]+", text.lower()) if t not in STOPWORDS}


# Similarity scorers, selectable by name from a variant config
SimilarityScorer = Callable[[str, str], float]
similarity_scorers: dict[str, SimilarityScorer] = {}


def similarity_scorer(name: str) -> Callable[[SimilarityScorer], SimilarityScorer]:
    def _wrapped(scorer: SimilarityScorer) -> SimilarityScorer:
        if name in similarity_scorers:
            raise ValueError(f"Similarity scorer {name} is already registered")
        similarity_scorers[name] = scorer
        return scorer

    return _wrapped


@similarity_scorer("token_overlap")
def token_overlap(option: str, query: str) -> float:
    """Fraction of the option's tokens that also appear in the query"""
    option_tokens = tokens(option)
    if not option_tokens:
        return 0.0
    return len(option_tokens & tokens(query)) / len(option_tokens)


@similarity_scorer("jaccard")
def jaccard(option: str, query: str) -> float:
    a, b = tokens(option), tokens(query)
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


class VariantConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    filter_mode: Literal["full", "reduced"] = "full"
    threshold: float = Field(default=0.8, ge=0, le=1)
    scorer: str = "token_overlap"

    @model_validator(mode="after")
    def _known_scorer(self) -> "VariantConfig":
        if self.scorer not in similarity_scorers:
            raise ValueError(
                f"Unknown similarity scorer {self.scorer!r}, expected one of {sorted(similarity_scorers)}"
            )
        return self


def search_rank(
    catalog: Catalog, query: str, *, limit: int = RESULTS_LIMIT
) -> list[Product]:
    """Rank products by the fraction of query tokens they contain"""
    if not query.strip():
        raise ValueError("Search query must be non-empty")
    query_tokens = tokens(query)
    if not query_tokens:
        return []
    scored = []
    for product in catalog.products:
        product_tokens = tokens(product.title) | tokens(
            " ".join(product.attributes.values())
        )
        score = len(query_tokens & product_tokens) / len(query_tokens)
        if score > 0:
            scored.append((score, product))
    scored.sort(key=lambda x: (-x[0], -x[1].rating, x[1].id))
    return [p for _, p in scored[:limit]]


def option_matches(product: Product, group: str, value: str) -> bool:
    """Does a product satisfy a single filter option?"""
    match group:
        case "Brand":
            return product.brand == value
        case "Department":
            return product.department == value
        case "Price":
            for label, low, high in PRICE_BUCKETS:
                if label == value:
                    return low <= product.price < high
        case "Rating":
            for label, minimum in RATING_OPTIONS:
                if label == value:
                    return product.rating >= minimum
    return False


def apply_filters(
    products: Iterable[Product], active: Iterable[tuple[str, str]]
) -> list[Product]:
    """Conjunctive across filter groups, disjunctive within a group"""
    by_group: dict[str, list[str]] = {}
    for group, value in active:
        by_group.setdefault(group, []).append(value)
    return [
        p
        for p in products
        if all(
            any(option_matches(p, group, v) for v in values)
            for group, values in by_group.items()
        )
    ]


def _candidate_options(results: list[Product]) -> dict[str, list[str]]:
    return {
        "Brand": sorted({p.brand for p in results}),
        "Department": sorted({p.department for p in results}),
        "Price": [
            label
            for label, low, high in PRICE_BUCKETS
            if any(low <= p.price < high for p in results)
        ],
        "Rating": [
            label
            for label, minimum in RATING_OPTIONS
            if any(p.rating >= minimum for p in results)
        ],
    }


def build_filter_groups(
    results: list[Product],
    variant: VariantConfig,
    query: str,
    active: Iterable[tuple[str, str]] = (),
) -> tuple[FilterGroup, ...]:
    """Derive the filter panel from a result set, pruning options in reduced mode"""
    active = set(active)
    scorer = similarity_scorers[variant.scorer]
    groups = []
    for name, values in _candidate_options(results).items():
        if variant.filter_mode == "reduced":
            values = [v for v in values if scorer(v, query) >= variant.threshold]
        if not values:
            continue
        groups.append(
            FilterGroup(
                name=name,
                options=tuple(
                    FilterOption(value=v, selected=(name, v) in active) for v in values
                ),
            )
        )
    return tuple(groups)


class ShopState(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    page: PageType = "home"
    query: str | None = None
    active_filters: tuple[tuple[str, str], ...] = ()
    # Product ids as ranked by the search, before filtering
    base_results: tuple[str, ...] = ()
    results: tuple[str, ...] = ()
    viewing: str | None = None
    purchases: tuple[tuple[str, float], ...] = ()
    terminated: bool = False

    @property
    def spend(self) -> float:
        return math.fsum(price for _, price in self.purchases)


def _detail(product: Product) -> ProductDetail:
    return ProductDetail(
        title=product.title,
        brand=product.brand,
        price=product.price,
        rating=product.rating,
        review_count=product.review_count,
        department=product.department,
        attributes=dict(product.attributes),
    )


def observe_state(state: ShopState, catalog: Catalog, variant: VariantConfig) -> Observation:
    """The observation an agent gets of a shop state"""
    cart_count = len(state.purchases)
    match state.page:
        case "home":
            return Observation(page_type="home", cart_count=cart_count)
        case "search_results":
            assert state.query is not None
            results = [catalog[x] for x in state.results]
            base = [catalog[x] for x in state.base_results]
            notices: tuple[str, ...] = ()
            if not results:
                notices = (f'No results for "{state.query}" with the selected filters.',)
            return Observation(
                page_type="search_results",
                query=state.query,
                products=tuple(
                    ProductSummary(
                        index=n,
                        title=p.title,
                        price=p.price,
                        rating=p.rating,
                        review_count=p.review_count,
                    )
                    for n, p in enumerate(results, start=1)
                ),
                filter_groups=build_filter_groups(
                    base, variant, state.query, state.active_filters
                ),
                cart_count=cart_count,
                notices=notices,
            )
        case "product_detail":
            assert state.viewing is not None
            return Observation(
                page_type="product_detail",
                query=state.query,
                detail=_detail(catalog[state.viewing]),
                cart_count=cart_count,
            )
        case "purchase_confirmation":
            assert state.viewing is not None
            product = catalog[state.viewing]
            return Observation(
                page_type="purchase_confirmation",
                query=state.query,
                detail=_detail(product),
                cart_count=cart_count,
                notices=(f"Order placed: {product.title}",),
            )
    raise AssertionError(f"Unhandled page {state.page}")


def transition(
    state: ShopState, action: Action, catalog: Catalog, variant: VariantConfig
) -> ShopState:
    """Apply one action to a shop state, returning the new state"""
    if state.terminated:
        raise OutOfSpaceError("The shopping session has already stopped")
    space = action_space(observe_state(state, catalog, variant))
    if not space.contains(action):
        raise OutOfSpaceError(f"Action {action!r} is not allowed on page {state.page}")

    match action:
        case Search(query=query):
            ranked = tuple(p.id for p in search_rank(catalog, query))
            return state.model_copy(
                update={
                    "page": "search_results",
                    "query": query,
                    "active_filters": (),
                    "base_results": ranked,
                    "results": ranked,
                    "viewing": None,
                }
            )
        case ClickFilter(group=group, value=value):
            active = set(state.active_filters)
            active ^= {(group, value)}
            filtered = apply_filters([catalog[x] for x in state.base_results], active)
            return state.model_copy(
                update={
                    "active_filters": tuple(sorted(active)),
                    "results": tuple(p.id for p in filtered),
                }
            )
        case ClickProduct(index=index):
            return state.model_copy(
                update={"page": "product_detail", "viewing": state.results[index - 1]}
            )
        case Purchase():
            assert state.viewing is not None
            price = catalog[state.viewing].price
            return state.model_copy(
                update={
                    "page": "purchase_confirmation",
                    "purchases": state.purchases + ((state.viewing, price),),
                }
            )
        case Stop():
            return state.model_copy(update={"terminated": True})
    raise AssertionError(f"Unhandled action {action!r}")


class MockShopSession:
    """An environment session over the in-process shop"""

    def __init__(self, catalog: Catalog, variant: VariantConfig):
        self.catalog = catalog
        self.variant = variant
        self.state = ShopState()

    def observe(self) -> Observation:
        return observe_state(self.state, self.catalog, self.variant)

    def perform(self, action: Action, space: ActionSpace) -> ExecResult:
        if isinstance(action, Stop) and self.state.terminated:
            return ExecResult.ok()
        self.state = transition(self.state, action, self.catalog, self.variant)
        return ExecResult.ok()

    def close(self) -> None:
        pass


#
# HTML rendering and serving
#

_PAGE_CLASSES = {
    "home": "page-home",
    "search_results": "page-results",
    "product_detail": "page-product",
    "purchase_confirmation": "page-confirmation",
}


def _esc(value: object) -> str:
    return html.escape(str(value), quote=True)


def _render_detail(detail: ProductDetail) -> str:
    attributes = "".join(
        f'<div class="attribute"><dt class="attribute-name">{_esc(k)}</dt>'
        f'<dd class="attribute-value">{_esc(v)}</dd></div>'
        for k, v in detail.attributes.items()
    )
    return (
        f'<h1 id="product-title">{_esc(detail.title)}</h1>'
        f'<span id="product-brand">{_esc(detail.brand)}</span>'
        f'<span id="product-department">{_esc(detail.department)}</span>'
        f'<span id="product-price">${detail.price:,.2f}</span>'
        f'<span id="product-rating">{detail.rating:g} out of 5 stars</span>'
        f'<span id="product-reviews">{detail.review_count:,} ratings</span>'
        f'<dl id="product-attributes">{attributes}</dl>'
    )


def render_html(obs: Observation) -> str:
    """Render an observation as a page matching the bundled mock-shop ruleset"""
    parts = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8"><title>Mock Shop</title></head>',
        f'<body class="{_PAGE_CLASSES[obs.page_type]}">',
        '<header><form id="search-form" action="/search" method="get">',
        f'<input id="search-box" name="q" value="{_esc(obs.query or "")}">',
        '<button id="search-submit" type="submit">Search</button></form>',
        f'<span id="cart-count">{obs.cart_count}</span></header>',
        '<div class="ad-banner">Sponsored: Save big on membership today!</div>',
        "<main>",
    ]
    parts.extend(f'<div class="notice">{_esc(n)}</div>' for n in obs.notices)

    match obs.page_type:
        case "home":
            parts.append('<section id="home"><h1>Welcome to the Mock Shop</h1></section>')
        case "search_results":
            parts.append('<div id="results-page"><aside id="filters">')
            for group in obs.filter_groups:
                parts.append(
                    f'<section class="filter-group" data-group="{_esc(group.name)}">'
                    f'<h3 class="filter-group-name">{_esc(group.name)}</h3><ul>'
                )
                for option in group.options:
                    query = urllib.parse.urlencode(
                        {"group": group.name, "value": option.value}
                    )
                    parts.append(
                        f'<li class="filter-option" data-group="{_esc(group.name)}" '
                        f'data-value="{_esc(option.value)}" '
                        f'data-selected="{"true" if option.selected else "false"}">'
                        f'<a href="/filter?{_esc(query)}" '
                        f'aria-current="{"true" if option.selected else "false"}">'
                        f'<span class="filter-option-label">{_esc(option.value)}</span></a></li>'
                    )
                parts.append("</ul></section>")
            parts.append('</aside><ol id="results">')
            for product in obs.products:
                parts.append(
                    f'<li class="product-card" data-index="{product.index}">'
                    f'<a class="product-link" href="/product?index={product.index}">'
                    f'<span class="product-title">{_esc(product.title)}</span></a>'
                    f'<span class="product-price">${product.price:,.2f}</span>'
                    f'<span class="product-rating">{product.rating:g} out of 5 stars</span>'
                    f'<span class="product-reviews">{product.review_count:,} ratings</span>'
                    "</li>"
                )
            parts.append("</ol></div>")
        case "product_detail":
            assert obs.detail is not None
            parts.append(
                f'<div id="product-detail">{_render_detail(obs.detail)}'
                '<form action="/purchase" method="post">'
                '<button id="buy-now" type="submit">Buy now</button></form></div>'
            )
        case "purchase_confirmation":
            assert obs.detail is not None
            parts.append(
                f'<div id="order-confirmation"><h2>Thank you for your order</h2>'
                f'<div id="product-detail">{_render_detail(obs.detail)}</div></div>'
            )
    parts.append("</main></body></html>")
    return "\n".join(parts)


def route_action(path: str, params: dict[str, str]) -> Action | None:
    """Map a mock-shop URL onto the action it represents. None means 'home'."""
    match path.rstrip("/") or "/":
        case "/":
            return None
        case "/search":
            return Search(query=params.get("q", ""))
        case "/filter":
            return ClickFilter(group=params.get("group", ""), value=params.get("value", ""))
        case "/product":
            return ClickProduct(index=int(params.get("index", "0")))
        case "/purchase":
            return Purchase()
    raise KeyError(f"No mock-shop route for {path}")


class ShopSite:
    """
    The mock shop as a website: one shop state per visitor id.

    Only the most recently seen ``max_visitors`` states are kept; an evicted
    visitor starts again from the home page.
    """

    def __init__(self, catalog: Catalog, variant: VariantConfig, max_visitors: int | None = None):
        self.catalog = catalog
        self.variant = variant
        self.max_visitors = max_visitors or default("serve", "max_visitors", int)
        self._states: OrderedDict[str, ShopState] = OrderedDict()
        self._lock = threading.Lock()

    def handle(self, visitor: str, path: str, params: dict[str, str]) -> tuple[int, str]:
        """Apply the request to the visitor's state and render the resulting page"""
        with self._lock:
            try:
                action = route_action(path, params)
            except (KeyError, ValueError) as e:
                return 404, f"<html><body><h1>Not found</h1><p>{_esc(e)}</p></body></html>"
            state = self._states.get(visitor, ShopState())
            if action is None:
                state = ShopState(purchases=state.purchases)
            else:
                try:
                    state = transition(state, action, self.catalog, self.variant)
                except (OutOfSpaceError, ValueError) as e:
                    return 400, f"<html><body><h1>Bad request</h1><p>{_esc(e)}</p></body></html>"
            self._states[visitor] = state
            self._states.move_to_end(visitor)
            while len(self._states) > self.max_visitors:
                evicted, _ = self._states.popitem(last=False)
                logger.debug(f"Forgetting shop state of visitor {evicted}")
            return 200, render_html(observe_state(state, self.catalog, self.variant))


def make_handler(site: ShopSite) -> type[http.server.BaseHTTPRequestHandler]:
    class _Handler(http.server.BaseHTTPRequestHandler):
        def _respond(self) -> None:
            url = urllib.parse.urlsplit(self.path)
            params = dict(urllib.parse.parse_qsl(url.query))
            if self.command == "POST":
                length = int(self.headers.get("Content-Length") or 0)
                params.update(urllib.parse.parse_qsl(self.rfile.read(length).decode()))
            visitor = None
            for chunk in (self.headers.get("Cookie") or "").split(";"):
                name, _, value = chunk.strip().partition("=")
                if name == "visitor":
                    visitor = value
            new_visitor = visitor is None
            visitor = visitor or uuid.uuid4().hex
            status, body = site.handle(visitor, url.path, params)
            payload = body.encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "text/html; charset=utf-8")
            self.send_header("Content-Length", str(len(payload)))
            if new_visitor:
                self.send_header("Set-Cookie", f"visitor={visitor}; Path=/")
            self.end_headers()
            self.wfile.write(payload)

        do_GET = _respond
        do_POST = _respond

        def log_message(self, format: str, *args) -> None:
            logger.debug(f"{self.address_string()} {format % args}")

    return _Handler


def make_server(
    catalog: Catalog, variant: VariantConfig, host: str = "127.0.0.1", port: int = 0
) -> http.server.ThreadingHTTPServer:
    """Create (but do not start) an HTTP server for one shop variant"""
    return http.server.ThreadingHTTPServer(
        (host, port), make_handler(ShopSite(catalog, variant))
    )
