"""
webdriver_env - Drive a real browser over the W3C WebDriver wire protocol.

Pages are snapshotted as HTML and turned into observations host-side with a
selector ruleset, so a new target site needs a ruleset file and no code.
Clicks that miss go through a fixed recovery ladder: retry, scroll into
view, then re-parse the page and re-resolve the target.
"""

from __future__ import annotations

import contextlib
import logging
import re
import time
from collections.abc import Callable
from pathlib import Path
from typing import Any, Literal

import httpx
from bs4 import BeautifulSoup, Tag
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import default, resolve_input_path, webdriver_endpoint
from .environment import (
    Action,
    ActionSpace,
    ClickFilter,
    ClickProduct,
    EnvError,
    ExecResult,
    ExecutionError,
    FilterGroup,
    FilterOption,
    Observation,
    PageType,
    ProductDetail,
    ProductSummary,
    Purchase,
    Search,
    SessionLostError,
    Stop,
    UnclassifiablePageError,
)
from .util import BOLD, NC

logger = logging.getLogger(__name__)

ELEMENT_KEY = "element-6066-11e4-a52e-4f735466cecf"
SCROLL_INTO_VIEW = "arguments[0].scrollIntoView({block: 'center'});"
READY_STATE = "return document.readyState;"
SETTLE_POLL = 0.1
SIGNATURE_LENGTH = 160


class WebDriverError(EnvError):
    """The driver answered a command with a protocol error"""

    def __init__(self, error: str, message: str = ""):
        self.error = error
        super().__init__(f"{error}: {message}" if message else error)


class DriverUnreachableError(WebDriverError):
    pass


class NoSuchElementError(WebDriverError):
    pass


class ClickInterceptedError(WebDriverError):
    pass


class StaleElementError(WebDriverError):
    pass


class ExtractionError(EnvError):
    """A classified page was missing an element its ruleset requires"""


# Failures worth walking the recovery ladder for
RECOVERABLE = (NoSuchElementError, ClickInterceptedError, StaleElementError)

_ERROR_TYPES: dict[str, type[WebDriverError]] = {
    "no such element": NoSuchElementError,
    "element click intercepted": ClickInterceptedError,
    "element not interactable": ClickInterceptedError,
    "stale element reference": StaleElementError,
}


#
# Rulesets
#

PostProcess = Literal["trim", "parse-price", "parse-rating", "parse-int", "parse-bool"]


class FieldRule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    selector: str
    # "text" for the element text, otherwise the name of an attribute
    attribute: str = "text"
    post: PostProcess = "trim"


class PageDetector(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    selector: str
    page_type: PageType


class ActionTargets(BaseModel):
    """Selector templates for the elements each action interacts with"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    search_box: str
    search_submit: str
    product: str
    filter_option: str
    purchase: str


COMMON_ROLES = ("query", "cart_count")
RESULTS_ROLES = (
    "product_card",
    "product_title",
    "product_price",
    "product_rating",
    "product_reviews",
    "filter_group",
    "filter_group_name",
    "filter_option",
    "filter_option_value",
    "filter_option_selected",
)
DETAIL_ROLES = (
    "detail_title",
    "detail_brand",
    "detail_department",
    "detail_price",
    "detail_rating",
    "detail_reviews",
    "detail_attribute",
    "detail_attribute_name",
    "detail_attribute_value",
)
ROLES_BY_PAGE: dict[str, tuple[str, ...]] = {
    "home": COMMON_ROLES,
    "search_results": COMMON_ROLES + RESULTS_ROLES,
    "product_detail": COMMON_ROLES + DETAIL_ROLES,
    "purchase_confirmation": COMMON_ROLES + DETAIL_ROLES,
}


class ExtractionRuleset(BaseModel):
    """
    How to read one site.

    Detectors are tried in order, so the most specific page comes first.
    Field rules for card, group, option and attribute parts are evaluated
    inside their container element; everything else against the document.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    page_detectors: tuple[PageDetector, ...] = Field(min_length=1)
    field_rules: dict[str, FieldRule]
    action_targets: ActionTargets

    @model_validator(mode="after")
    def _rules_cover_pages(self) -> "ExtractionRuleset":
        for page_type in {d.page_type for d in self.page_detectors}:
            missing = [r for r in ROLES_BY_PAGE[page_type] if r not in self.field_rules]
            if missing:
                raise ValueError(
                    f"Ruleset {self.name} detects {page_type} pages but has no rule for: {', '.join(missing)}"
                )
        return self


def load_ruleset(name_or_path: str | Path, base_dir: Path | None = None) -> ExtractionRuleset:
    """Load a ruleset file, or one of the bundled rulesets by name"""
    path = Path(name_or_path)
    if path.suffix != ".json":
        path = Path("rulesets") / f"{path}.json"
    path = resolve_input_path(path, base_dir)
    logger.debug(f"Reading extraction ruleset {BOLD}{path}{NC}")
    return ExtractionRuleset.model_validate_json(path.read_text(encoding="utf-8"))


#
# Extraction
#

_NUMBER = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?")


def _number(text: str) -> str:
    match = _NUMBER.search(text)
    if match is None:
        raise ValueError(f"No number in {text!r}")
    return match.group(0).replace(",", "")


def post_process(value: str, post: PostProcess) -> Any:
    """Apply a field rule's post-processing to the raw extracted string"""
    value = " ".join(value.split())
    match post:
        case "trim":
            return value
        case "parse-price" | "parse-rating":
            return float(_number(value))
        case "parse-int":
            return int(float(_number(value)))
        case "parse-bool":
            return value.lower() in {"true", "1", "yes", "selected", "checked"}
    raise AssertionError(f"Unhandled post-processing {post}")


def _raw(element: Tag, rule: FieldRule) -> str | None:
    if rule.attribute == "text":
        return element.get_text(" ", strip=True)
    value = element.get(rule.attribute)
    if isinstance(value, list):
        value = " ".join(value)
    return value


def _field(scope: Tag, rules: ExtractionRuleset, role: str, *, required: bool = True) -> Any:
    rule = rules.field_rules[role]
    element = scope.select_one(rule.selector)
    raw = None if element is None else _raw(element, rule)
    if raw is None:
        if required:
            raise ExtractionError(
                f"Ruleset {rules.name}: no value for {role} (selector {rule.selector!r})"
            )
        return None
    try:
        return post_process(raw, rule.post)
    except ValueError as e:
        raise ExtractionError(f"Ruleset {rules.name}: bad value for {role}: {e}") from e


def _select(scope: Tag, rules: ExtractionRuleset, role: str) -> list[Tag]:
    return scope.select(rules.field_rules[role].selector)


def page_signature(soup: BeautifulSoup) -> str:
    title = soup.title.get_text(strip=True) if soup.title else ""
    text = " ".join(soup.get_text(" ", strip=True).split())
    return f"{title} | {text}"[:SIGNATURE_LENGTH]


def detect_page(soup: BeautifulSoup, rules: ExtractionRuleset) -> PageType | None:
    for detector in rules.page_detectors:
        if soup.select_one(detector.selector) is not None:
            return detector.page_type
    return None


def _detail(soup: BeautifulSoup, rules: ExtractionRuleset) -> ProductDetail:
    attributes = {}
    for element in _select(soup, rules, "detail_attribute"):
        name = _field(element, rules, "detail_attribute_name")
        attributes[name] = _field(element, rules, "detail_attribute_value")
    return ProductDetail(
        title=_field(soup, rules, "detail_title"),
        brand=_field(soup, rules, "detail_brand"),
        department=_field(soup, rules, "detail_department"),
        price=_field(soup, rules, "detail_price"),
        rating=_field(soup, rules, "detail_rating"),
        review_count=_field(soup, rules, "detail_reviews"),
        attributes=attributes,
    )


def _results(soup: BeautifulSoup, rules: ExtractionRuleset) -> dict[str, Any]:
    products = tuple(
        ProductSummary(
            index=n,
            title=_field(card, rules, "product_title"),
            price=_field(card, rules, "product_price"),
            rating=_field(card, rules, "product_rating"),
            review_count=_field(card, rules, "product_reviews"),
        )
        for n, card in enumerate(_select(soup, rules, "product_card"), start=1)
    )
    groups = []
    for element in _select(soup, rules, "filter_group"):
        options = {}
        for option in _select(element, rules, "filter_option"):
            value = _field(option, rules, "filter_option_value")
            selected = _field(option, rules, "filter_option_selected", required=False)
            options.setdefault(value, FilterOption(value=value, selected=bool(selected)))
        if options:
            groups.append(
                FilterGroup(
                    name=_field(element, rules, "filter_group_name"),
                    options=tuple(options.values()),
                )
            )
    return {"products": products, "filter_groups": tuple(groups)}


def extract(html: str, rules: ExtractionRuleset) -> Observation:
    """Turn a page snapshot into an observation. Anything no rule selects is dropped."""
    soup = BeautifulSoup(html, "html.parser")
    page_type = detect_page(soup, rules)
    if page_type is None:
        raise UnclassifiablePageError(page_signature(soup))

    fields: dict[str, Any] = {
        "page_type": page_type,
        "query": _field(soup, rules, "query", required=False) or None,
        "cart_count": _field(soup, rules, "cart_count", required=False) or 0,
    }
    if "notice" in rules.field_rules:
        fields["notices"] = tuple(
            text
            for element in _select(soup, rules, "notice")
            if (text := post_process(_raw(element, rules.field_rules["notice"]) or "", "trim"))
        )
    if page_type == "search_results":
        fields.update(_results(soup, rules))
    elif page_type in {"product_detail", "purchase_confirmation"}:
        fields["detail"] = _detail(soup, rules)
    return Observation(**fields)


def _css_string(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"')


def target_selector(rules: ExtractionRuleset, action: Action) -> str:
    """The selector of the element an action acts on"""
    targets = rules.action_targets
    match action:
        case Search():
            return targets.search_box
        case ClickProduct(index=index):
            return targets.product.format(index=index)
        case ClickFilter(group=group, value=value):
            return targets.filter_option.format(
                group=_css_string(group), value=_css_string(value)
            )
        case Purchase():
            return targets.purchase
    raise ValueError(f"Action {action!r} has no target element")


def reresolve(action: Action, before: Observation, after: Observation) -> Action | None:
    """
    Find the same target on a re-parsed page, or None if it has gone.

    Products are matched by title, since a re-rendered list may reorder.
    """
    match action:
        case ClickProduct(index=index):
            if after.page_type != "search_results" or index > len(before.products):
                return None
            title = before.products[index - 1].title
            for product in after.products:
                if product.title == title:
                    return ClickProduct(index=product.index)
            return None
        case ClickFilter(group=group, value=value):
            for filter_group in after.filter_groups:
                if filter_group.name == group and any(
                    o.value == value for o in filter_group.options
                ):
                    return action
            return None
        case Purchase():
            return action if after.page_type == "product_detail" else None
        case Search():
            return action
    return None


#
# Wire protocol
#


def capabilities(headless: bool) -> dict[str, Any]:
    args = ["--window-size=1280,900"]
    if headless:
        args.insert(0, "--headless=new")
    return {
        "alwaysMatch": {"browserName": "chrome", "goog:chromeOptions": {"args": args}}
    }


class WebDriverClient:
    """A thin client for the W3C WebDriver HTTP endpoints"""

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        if timeout is None:
            timeout = default("webdriver", "request_timeout", float)
        self._http = httpx.Client(
            base_url=self.endpoint, timeout=timeout, transport=transport
        )

    def close(self) -> None:
        self._http.close()

    def command(self, method: str, path: str, payload: dict | None = None) -> Any:
        try:
            response = self._http.request(method, path, json=payload)
        except httpx.TransportError as e:
            raise DriverUnreachableError(
                "unreachable", f"WebDriver endpoint {self.endpoint} could not be reached ({e})"
            ) from e
        try:
            body = response.json()
        except ValueError:
            raise WebDriverError(
                "invalid response",
                f"{method} {path} returned HTTP {response.status_code} without JSON",
            ) from None
        value = body.get("value") if isinstance(body, dict) else None
        if response.is_error or (isinstance(value, dict) and "error" in value):
            error = value.get("error", "unknown error") if isinstance(value, dict) else "unknown error"
            message = value.get("message", "") if isinstance(value, dict) else ""
            if error == "invalid session id":
                raise SessionLostError(f"WebDriver session lost: {message}")
            if error == "session not created":
                raise WebDriverError(error, f"{self.endpoint} rejected the session: {message}")
            raise _ERROR_TYPES.get(error, WebDriverError)(error, message)
        return value

    def new_session(self, caps: dict[str, Any]) -> str:
        value = self.command("POST", "/session", {"capabilities": caps})
        return value["sessionId"]

    def delete_session(self, session_id: str) -> None:
        self.command("DELETE", f"/session/{session_id}")

    def navigate(self, session_id: str, url: str) -> None:
        self.command("POST", f"/session/{session_id}/url", {"url": url})

    def page_source(self, session_id: str) -> str:
        return self.command("GET", f"/session/{session_id}/source")

    def find_element(self, session_id: str, css: str) -> str:
        value = self.command(
            "POST",
            f"/session/{session_id}/element",
            {"using": "css selector", "value": css},
        )
        return value[ELEMENT_KEY]

    def click(self, session_id: str, element: str) -> None:
        self.command("POST", f"/session/{session_id}/element/{element}/click", {})

    def clear(self, session_id: str, element: str) -> None:
        self.command("POST", f"/session/{session_id}/element/{element}/clear", {})

    def send_keys(self, session_id: str, element: str, text: str) -> None:
        self.command(
            "POST", f"/session/{session_id}/element/{element}/value", {"text": text}
        )

    def execute_script(self, session_id: str, script: str, args: list | None = None) -> Any:
        return self.command(
            "POST",
            f"/session/{session_id}/execute/sync",
            {"script": script, "args": args or []},
        )


#
# Sessions
#


class BrowserConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    driver_endpoint: str
    start_url: str
    variant: str
    headless: bool = True
    settle_timeout: float = Field(
        default_factory=lambda: default("webdriver", "settle_timeout", float), gt=0
    )
    retry_delay: float = Field(
        default_factory=lambda: default("webdriver", "retry_delay", float), ge=0
    )


class BrowserSession(BaseModel):
    model_config = ConfigDict(frozen=True)

    driver_endpoint: str
    session_id: str
    variant: str
    start_url: str
    headless: bool


def open_browser(client: WebDriverClient, config: BrowserConfig) -> BrowserSession:
    """Start a browser session and navigate it to the variant's start page"""
    session_id = client.new_session(capabilities(config.headless))
    logger.debug(f"Opened browser session {session_id} for variant {config.variant}")
    try:
        client.navigate(session_id, config.start_url)
    except Exception:
        with contextlib.suppress(WebDriverError, SessionLostError):
            client.delete_session(session_id)
        raise
    return BrowserSession(
        driver_endpoint=client.endpoint,
        session_id=session_id,
        variant=config.variant,
        start_url=config.start_url,
        headless=config.headless,
    )


def snapshot(client: WebDriverClient, session: BrowserSession) -> str:
    return client.page_source(session.session_id)


def _act(
    client: WebDriverClient,
    session: BrowserSession,
    action: Action,
    rules: ExtractionRuleset,
    *,
    scroll: bool = False,
) -> None:
    session_id = session.session_id
    element = client.find_element(session_id, target_selector(rules, action))
    if scroll:
        client.execute_script(session_id, SCROLL_INTO_VIEW, [{ELEMENT_KEY: element}])
    if isinstance(action, Search):
        client.clear(session_id, element)
        client.send_keys(session_id, element, action.query)
        element = client.find_element(session_id, rules.action_targets.search_submit)
    client.click(session_id, element)


def perform(
    client: WebDriverClient,
    session: BrowserSession,
    action: Action,
    rules: ExtractionRuleset,
    before: Observation,
    *,
    retry_delay: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> ExecResult:
    """Carry out an action, walking retry, scroll and reparse at most once each"""
    if isinstance(action, Stop):
        return ExecResult.ok()
    try:
        _act(client, session, action, rules)
        return ExecResult.ok()
    except RECOVERABLE as e:
        last_error: Exception = e
        logger.debug(f"{action!r} failed ({e}), retrying")

    sleep(retry_delay)
    try:
        _act(client, session, action, rules)
        return ExecResult.recovered("retry")
    except RECOVERABLE as e:
        last_error = e
        logger.debug(f"{action!r} failed again ({e}), scrolling into view")

    try:
        _act(client, session, action, rules, scroll=True)
        return ExecResult.recovered("scroll")
    except RECOVERABLE as e:
        last_error = e
        logger.debug(f"{action!r} failed after scrolling ({e}), re-parsing page")

    try:
        after = extract(snapshot(client, session), rules)
        target = reresolve(action, before, after)
        if target is not None:
            _act(client, session, target, rules)
            return ExecResult.recovered("reparse")
    except (*RECOVERABLE, UnclassifiablePageError, ExtractionError) as e:
        last_error = e
    raise ExecutionError(f"Could not perform {action!r}: {last_error}", last_error=last_error)


class WebDriverEnv:
    """An environment session backed by a live browser"""

    def __init__(
        self,
        config: BrowserConfig,
        rules: ExtractionRuleset,
        *,
        client: WebDriverClient | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.rules = rules
        self._owns_client = client is None
        self.client = client or WebDriverClient(webdriver_endpoint(config.driver_endpoint))
        self._sleep = sleep
        self._clock = clock
        try:
            self.session = open_browser(self.client, config)
        except Exception:
            if self._owns_client:
                self.client.close()
            raise
        try:
            self.settle()
        except Exception:
            self.close()
            raise

    def settle(self) -> None:
        """Wait until the document is ready and some page detector matches"""
        deadline = self._clock() + self.config.settle_timeout
        session_id = self.session.session_id
        while True:
            try:
                state = self.client.execute_script(session_id, READY_STATE)
                if state == "complete":
                    soup = BeautifulSoup(self.client.page_source(session_id), "html.parser")
                    if detect_page(soup, self.rules) is not None:
                        return
            except (DriverUnreachableError, SessionLostError):
                raise
            except WebDriverError as e:
                logger.debug(f"Waiting for page to settle: {e}")
            if self._clock() >= deadline:
                logger.warning(
                    f"Page in session {session_id} did not settle within {self.config.settle_timeout:g}s"
                )
                return
            self._sleep(SETTLE_POLL)

    def observe(self) -> Observation:
        return extract(snapshot(self.client, self.session), self.rules)

    def perform(self, action: Action, space: ActionSpace) -> ExecResult:
        if isinstance(action, Stop):
            return ExecResult.ok()
        before = self.observe()
        try:
            result = perform(
                self.client,
                self.session,
                action,
                self.rules,
                before,
                retry_delay=self.config.retry_delay,
                sleep=self._sleep,
            )
        except ExecutionError as e:
            logger.debug(str(e))
            return ExecResult.failed(str(e))
        self.settle()
        return result

    def close(self) -> None:
        try:
            self.client.delete_session(self.session.session_id)
        except (WebDriverError, SessionLostError) as e:
            logger.debug(f"Ignoring error closing session {self.session.session_id}: {e}")
        if self._owns_client:
            self.client.close()
