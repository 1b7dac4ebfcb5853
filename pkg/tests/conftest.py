import json
import re
import urllib.parse
from collections.abc import Callable, Sequence
from pathlib import Path

import httpx
import pytest
from bs4 import BeautifulSoup

from agentab.agent import serialize_action
from agentab.environment import (
    Action,
    ClickFilter,
    ClickProduct,
    ExecResult,
    Observation,
    ProductDetail,
    Purchase,
    Search,
    Stop,
)
from agentab.mock_shop import Catalog, ShopSite, VariantConfig, load_catalog
from agentab.model_client import ScriptedPolicy
from agentab.persona import (
    AgentSpec,
    CategoricalAttribute,
    Intention,
    IntentionTemplate,
    NumericAttribute,
    Persona,
)
from agentab.trace_store import SessionOutcome, SessionTrace, StepRecord, compute_totals
from agentab.webdriver_env import ELEMENT_KEY, READY_STATE, SCROLL_INTO_VIEW

FIXTURES = Path(__file__).parent / "fixtures"

MARCUS = """Persona: Marcus

Background:
Marcus is a 35-year-old freelance graphic designer living in Austin, Texas. After working for a decade in various creative agencies, he transitioned to freelancing to gain more control over his schedule and focus on passion projects, such as illustrating indie game assets and creating digital art for local musicians.

Demographics:

Age: 35

Gender: Male

Education: Bachelor's degree in Visual Communication

Profession: Freelance Graphic Designer

Income: $70,000 (variable based on projects)

Financial Situation:
Marcus earns a decent living from his freelance gigs, though his income can fluctuate. He's financially stable but cautious about big expenses.

Shopping Habits:
Marcus enjoys discovering unique or niche products, especially tech gadgets, art supplies, and streetwear. He prefers shopping online for the variety and reads reviews carefully.

Professional Life:
Marcus works from a home studio that doubles as a creative space. He collaborates remotely with clients from different industries.

Personal Style:
Marcus has an edgy and expressive fashion sense. His go-to outfit is a soft hoodie with a custom design, black joggers, and high-top sneakers.
"""


@pytest.fixture
def marcus_text() -> str:
    return MARCUS


@pytest.fixture(scope="session")
def catalog() -> Catalog:
    return load_catalog()


def make_spec(count: int = 20) -> AgentSpec:
    return AgentSpec(
        count=count,
        population_description="Online shoppers in the United States.",
        attributes=(
            NumericAttribute(name="age", min=18, max=75, distribution="normal", mean=40, sd=13),
            NumericAttribute(name="income", min=20_000, max=200_000, distribution="normal", mean=70_000, sd=30_000),
            CategoricalAttribute(name="gender", values=("Female", "Male")),
        ),
        intention_spec=(
            IntentionTemplate(
                template="Buy a {product} for under ${budget}",
                slots={"product": ("solar filter for telescope",), "budget": ("60",)},
            ),
        ),
    )


@pytest.fixture
def agent_spec() -> AgentSpec:
    return make_spec()


def make_persona(index: int, **demographics) -> Persona:
    values = {
        "age": 30 + index % 30,
        "gender": ("Female", "Male")[index % 2],
        "education": "Bachelor's degree",
        "profession": "Teacher",
        "income": 40_000 + 1_000 * index,
    }
    values.update(demographics)
    return Persona(
        id=f"persona-{index:06d}",
        name=f"Shopper {index}",
        demographics=values,
        narrative={"background": "Shops online."},
    )


@pytest.fixture
def intention() -> Intention:
    return Intention(
        goal_text="Buy a solar filter for telescope for under $60",
        budget_limit=60,
        category_hint="solar filter for telescope",
    )


def buyer_policy(purchase: float = 1.0, seed: int = 0) -> ScriptedPolicy:
    """Search, open the first affordable result, then buy with the given probability"""
    detail_rule: dict = {"when": {"page_type": "product_detail", "purchased": False}}
    if purchase >= 1.0:
        detail_rule["actions"] = ["purchase"]
    else:
        detail_rule["actions"] = ["purchase", "stop"]
        detail_rule["weights"] = [purchase, 1 - purchase]
    return ScriptedPolicy.model_validate(
        {
            "seed": seed,
            "rules": [
                {"when": {"page_type": "purchase_confirmation"}, "actions": ["stop"]},
                {"when": {"page_type": "home"}, "actions": ['Thought: find it.\nAction: search("{query}")']},
                {"when": {"page_type": "search_results"}, "actions": ["click_product({affordable_index})"]},
                {"when": {"page_type": "search_results"}, "actions": ["click_product({top_rated_index})"]},
                detail_rule,
                {"actions": ["stop"]},
            ],
        }
    )


#
# A fake WebDriver endpoint, for driving pages through the wire protocol
#


def static_loader(directory: Path = FIXTURES) -> Callable[[str, dict], str | None]:
    """Serve fixture files by name; '#' links keep the current page"""

    def load(url: str, params: dict) -> str | None:
        path = urllib.parse.urlsplit(url).path
        if not path or url.startswith("#"):
            return None
        return (directory / Path(path).name).read_text(encoding="utf-8")

    return load


def site_loader(site: ShopSite) -> Callable[[str, dict], str | None]:
    """Route navigation through a mock-shop site, as a browser with one cookie would"""

    def load(url: str, params: dict) -> str | None:
        parts = urllib.parse.urlsplit(url)
        merged = dict(urllib.parse.parse_qsl(parts.query))
        merged.update(params)
        status, body = site.handle("fake-browser", parts.path or "/", merged)
        return body

    return load


class FakeDriver:
    """
    Enough of a W3C WebDriver to drive static pages or the mock-shop site.

    Faults: ``missing`` selectors never resolve; ``intercepted`` selectors
    refuse clicks until scrolled into view; ``flaky`` maps selectors to a
    number of clicks that fail before one succeeds; ``swap_on_miss`` replaces
    the page the first time an element cannot be found; ``fail`` maps
    command paths such as ``/url`` to the error they always answer with.
    """

    def __init__(
        self,
        load: Callable[[str, dict], str | None],
        *,
        missing: set[str] = frozenset(),
        intercepted: set[str] = frozenset(),
        flaky: dict[str, int] | None = None,
        swap_on_miss: str | None = None,
        ready_after: int = 0,
        fail: dict[str, str] | None = None,
    ):
        self.load = load
        self.html = "<html><head><title>about:blank</title></head><body></body></html>"
        self.missing = set(missing)
        self.intercepted = set(intercepted)
        self.flaky = dict(flaky or {})
        self.swap_on_miss = swap_on_miss
        self.ready_after = ready_after
        self.fail = dict(fail or {})
        self.scrolled: set[str] = set()
        self.elements: dict[str, str] = {}
        self.typed: dict[str, str] = {}
        self.log: list[tuple[str, str]] = []
        self.sessions = 0
        self.deleted = 0

    @property
    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handle)

    def _error(self, status: int, error: str, message: str = "") -> httpx.Response:
        return httpx.Response(status, json={"value": {"error": error, "message": message}})

    def _ok(self, value=None) -> httpx.Response:
        return httpx.Response(200, json={"value": value})

    def _navigate(self, url: str, params: dict | None = None) -> None:
        html = self.load(url, params or {})
        if html is not None:
            self.html = html
            self.scrolled.clear()

    def _click(self, css: str) -> None:
        soup = BeautifulSoup(self.html, "html.parser")
        tag = soup.select_one(css)
        if tag is None:
            raise LookupError(css)
        if tag.name == "a":
            self._navigate(tag.get("href", "#"))
            return
        form = tag.find_parent("form")
        if form is None:
            return
        params = {}
        for field in form.select("input[name]"):
            selector = f"#{field['id']}" if field.get("id") else ""
            params[field["name"]] = self.typed.get(selector, field.get("value", ""))
        self._navigate(form.get("action", "#"), params)

    def handle(self, request: httpx.Request) -> httpx.Response:
        path = request.url.path
        body = json.loads(request.content) if request.content else {}
        if path == "/session" and request.method == "POST":
            self.sessions += 1
            return self._ok({"sessionId": "fake-session", "capabilities": {}})
        match = re.fullmatch(r"/session/([^/]+)(/.*)?", path)
        if match is None:
            return self._error(404, "unknown command", path)
        if match.group(1) != "fake-session":
            return self._error(404, "invalid session id", match.group(1))
        rest = match.group(2) or ""
        if rest in self.fail:
            return self._error(500, self.fail[rest], rest)

        if rest == "" and request.method == "DELETE":
            self.deleted += 1
            return self._ok()
        if rest == "/url":
            self.log.append(("navigate", body["url"]))
            self._navigate(body["url"])
            return self._ok()
        if rest == "/source":
            self.log.append(("source", ""))
            return self._ok(self.html)
        if rest == "/execute/sync":
            if body["script"] == READY_STATE:
                if self.ready_after > 0:
                    self.ready_after -= 1
                    return self._ok("loading")
                return self._ok("complete")
            if body["script"] == SCROLL_INTO_VIEW:
                css = self.elements[body["args"][0][ELEMENT_KEY]]
                self.log.append(("scroll", css))
                self.scrolled.add(css)
                return self._ok()
            return self._error(500, "javascript error", "unknown script")
        if rest == "/element":
            css = body["value"]
            self.log.append(("find", css))
            found = css not in self.missing and BeautifulSoup(self.html, "html.parser").select_one(css) is not None
            if not found:
                if self.swap_on_miss:
                    self._navigate(self.swap_on_miss)
                    self.swap_on_miss = None
                return self._error(404, "no such element", css)
            element = f"element-{len(self.elements)}"
            self.elements[element] = css
            return self._ok({ELEMENT_KEY: element})
        element_match = re.fullmatch(r"/element/([^/]+)/(click|clear|value)", rest)
        if element_match:
            css = self.elements[element_match.group(1)]
            command = element_match.group(2)
            if command == "clear":
                self.typed[css] = ""
                return self._ok()
            if command == "value":
                self.typed[css] = self.typed.get(css, "") + body["text"]
                return self._ok()
            if self.flaky.get(css, 0) > 0:
                self.flaky[css] -= 1
                self.log.append(("click-failed", css))
                return self._error(400, "element click intercepted", css)
            if css in self.intercepted and css not in self.scrolled:
                self.log.append(("click-failed", css))
                return self._error(400, "element click intercepted", css)
            self.log.append(("click", css))
            try:
                self._click(css)
            except LookupError:
                return self._error(404, "stale element reference", css)
            return self._ok()
        return self._error(404, "unknown command", rest)


@pytest.fixture
def mockshop_site(catalog) -> ShopSite:
    return ShopSite(catalog, VariantConfig(filter_mode="full"))


#
# Traces built by hand, for the store and the analysis
#


def make_step(index: int, action: Action, price: float = 20.0, failed: bool = False) -> StepRecord:
    if isinstance(action, Purchase):
        observation = Observation(
            page_type="product_detail",
            detail=ProductDetail(
                title="Thing", brand="Acme", price=price, rating=4, review_count=1, department="Audio"
            ),
        )
    else:
        observation = Observation(page_type="home")
    result = ExecResult.failed("gone") if failed else ExecResult.ok()
    return StepRecord(
        step_index=index,
        observation=observation,
        prompt_digest="0" * 64,
        raw_model_text=serialize_action(action),
        action=action,
        exec=result,
    )


def make_trace(
    session_id: str,
    arm: str,
    actions: Sequence[Action],
    *,
    price: float = 20.0,
    kind: str = "stopped",
    persona_id: str | None = None,
) -> SessionTrace:
    steps = tuple(make_step(n, action, price) for n, action in enumerate(actions))
    totals, spend = compute_totals(steps)
    return SessionTrace(
        session_id=session_id,
        persona_id=persona_id or session_id.split("-", 1)[-1],
        arm=arm,
        steps=steps,
        outcome=SessionOutcome(
            kind=kind, converted=totals["purchase"] >= 1, purchases=totals["purchase"], spend=spend
        ),
        totals=totals,
        spend=spend,
        duration=1.5,
    )


def shopper(searches: int, purchases: int = 0, filters: int = 0) -> list[Action]:
    """A session's actions: searches, filter clicks, one product view per purchase, then stop"""
    actions: list[Action] = [Search(query="speaker")] * searches
    actions += [ClickFilter(group="Brand", value="JBL")] * filters
    for _ in range(purchases):
        actions += [ClickProduct(index=1), Purchase()]
    return actions + [Stop()]
