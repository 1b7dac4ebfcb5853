"""
The contract shared by every environment backend.

An environment session is observed as a structured, JSON-serialisable
snapshot of the current page (``Observation``). The legal moves for that
snapshot are derived purely from it (``action_space``), and a chosen move
is carried out with ``execute``, which reports whether any recovery was
needed along the way.
"""

from __future__ import annotations

import logging
from typing import Annotated, Literal, Protocol, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator

logger = logging.getLogger(__name__)

PageType = Literal["home", "search_results", "product_detail", "purchase_confirmation"]
PAGE_TYPES: tuple[PageType, ...] = (
    "home",
    "search_results",
    "product_detail",
    "purchase_confirmation",
)

ActionKind = Literal["search", "click_product", "click_filter_option", "purchase", "stop"]
ACTION_KINDS: tuple[ActionKind, ...] = (
    "search",
    "click_product",
    "click_filter_option",
    "purchase",
    "stop",
)


class OutOfSpaceError(ValueError):
    """An action was executed that the current action space does not allow"""


class EnvError(RuntimeError):
    """Base for failures of an environment backend"""


class SessionLostError(EnvError):
    """The environment session has gone away"""


class UnclassifiablePageError(EnvError):
    """No page detector recognised the current page"""

    def __init__(self, signature: str):
        self.signature = signature
        super().__init__(f"Could not classify page with signature: {signature!r}")


class ExecutionError(EnvError):
    """An action could not be carried out, even after recovery"""

    def __init__(self, message: str, last_error: Exception | None = None):
        self.last_error = last_error
        super().__init__(message)


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ProductSummary(_Frozen):
    index: int = Field(ge=1)
    title: str
    price: float = Field(ge=0)
    rating: float = Field(ge=0, le=5)
    review_count: int = Field(ge=0)


class FilterOption(_Frozen):
    value: str
    selected: bool = False


class FilterGroup(_Frozen):
    name: str
    options: tuple[FilterOption, ...]

    @model_validator(mode="after")
    def _unique_values(self) -> "FilterGroup":
        values = [x.value for x in self.options]
        if len(values) != len(set(values)):
            raise ValueError(f"Duplicate option values in filter group {self.name}")
        return self


class ProductDetail(_Frozen):
    title: str
    brand: str
    price: float = Field(ge=0)
    rating: float = Field(ge=0, le=5)
    review_count: int = Field(ge=0)
    department: str
    attributes: dict[str, str] = {}


class Observation(_Frozen):
    page_type: PageType
    query: str | None = None
    products: tuple[ProductSummary, ...] = ()
    filter_groups: tuple[FilterGroup, ...] = ()
    detail: ProductDetail | None = None
    cart_count: int = Field(default=0, ge=0)
    notices: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_page(self) -> "Observation":
        for position, product in enumerate(self.products, start=1):
            if product.index != position:
                raise ValueError(
                    f"Product indices must run consecutively from 1, got {product.index} at position {position}"
                )
        if self.page_type == "home" and (self.products or self.filter_groups):
            raise ValueError("Home page observations carry no products or filters")
        return self

    def to_json(self) -> str:
        """Canonical JSON form; field order is the declaration order"""
        return self.model_dump_json()


class Search(_Frozen):
    kind: Literal["search"] = "search"
    query: str

    @model_validator(mode="after")
    def _non_empty(self) -> "Search":
        if not self.query.strip():
            raise ValueError("Search query must be non-empty")
        return self


class ClickProduct(_Frozen):
    kind: Literal["click_product"] = "click_product"
    index: int = Field(ge=1)


class ClickFilter(_Frozen):
    kind: Literal["click_filter_option"] = "click_filter_option"
    group: str
    value: str


class Purchase(_Frozen):
    kind: Literal["purchase"] = "purchase"


class Stop(_Frozen):
    kind: Literal["stop"] = "stop"


Action = Annotated[
    Union[Search, ClickProduct, ClickFilter, Purchase, Stop],
    Field(discriminator="kind"),
]
ActionAdapter: TypeAdapter[Action] = TypeAdapter(Action)


class ActionSpace(_Frozen):
    """The set of legal moves for one observation. Stop is always allowed."""

    search: bool = True
    product_indices: tuple[int, ...] = ()
    filter_options: tuple[tuple[str, str], ...] = ()
    purchase: bool = False
    # Accepts any well-formed action, for grammar checks outside a page
    unrestricted: bool = False

    @classmethod
    def everything(cls) -> "ActionSpace":
        return cls(unrestricted=True)

    @property
    def kinds(self) -> set[ActionKind]:
        if self.unrestricted:
            return set(ACTION_KINDS)
        kinds: set[ActionKind] = {"stop"}
        if self.search:
            kinds.add("search")
        if self.product_indices:
            kinds.add("click_product")
        if self.filter_options:
            kinds.add("click_filter_option")
        if self.purchase:
            kinds.add("purchase")
        return kinds

    def contains(self, action: Action) -> bool:
        if self.unrestricted or isinstance(action, Stop):
            return True
        match action:
            case Search():
                return self.search
            case ClickProduct(index=index):
                return index in self.product_indices
            case ClickFilter(group=group, value=value):
                return (group, value) in self.filter_options
            case Purchase():
                return self.purchase
        return False


class ExecResult(_Frozen):
    status: Literal["ok", "recovered", "failed"]
    strategy: Literal["retry", "scroll", "reparse"] | None = None
    reason: str | None = None
    latency: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "ExecResult":
        if self.status == "recovered" and self.strategy is None:
            raise ValueError("Recovered executions must name their strategy")
        if self.status == "failed" and not self.reason:
            raise ValueError("Failed executions must give a reason")
        return self

    @classmethod
    def ok(cls) -> "ExecResult":
        return cls(status="ok")

    @classmethod
    def recovered(cls, strategy: Literal["retry", "scroll", "reparse"]) -> "ExecResult":
        return cls(status="recovered", strategy=strategy)

    @classmethod
    def failed(cls, reason: str) -> "ExecResult":
        return cls(status="failed", reason=reason)

    def describe(self) -> str:
        if self.status == "recovered":
            return f"recovered ({self.strategy})"
        if self.status == "failed":
            return f"failed: {self.reason}"
        return "ok"


class EnvSession(Protocol):
    """One live environment, owned by a single worker at a time"""

    def observe(self) -> Observation: ...

    def perform(self, action: Action, space: ActionSpace) -> ExecResult: ...

    def close(self) -> None: ...


def observe(session: EnvSession) -> Observation:
    return session.observe()


def action_space(obs: Observation) -> ActionSpace:
    """Derive the legal moves from an observation alone"""
    match obs.page_type:
        case "home" | "purchase_confirmation":
            return ActionSpace()
        case "search_results":
            return ActionSpace(
                product_indices=tuple(p.index for p in obs.products),
                filter_options=tuple(
                    (group.name, option.value)
                    for group in obs.filter_groups
                    for option in group.options
                ),
            )
        case "product_detail":
            return ActionSpace(purchase=True)
    raise AssertionError(f"Unhandled page type {obs.page_type}")


def execute(
    session: EnvSession, action: Action, space: ActionSpace | None = None
) -> ExecResult:
    """Carry out an action, refusing anything outside the current action space"""
    if space is None:
        space = action_space(session.observe())
    if not space.contains(action):
        raise OutOfSpaceError(f"Action {action!r} is not in the current action space")
    return session.perform(action, space)
