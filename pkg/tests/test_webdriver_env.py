import itertools

import pytest

from agentab.environment import (
    ClickFilter,
    ClickProduct,
    ExecutionError,
    Observation,
    Purchase,
    Search,
    SessionLostError,
    UnclassifiablePageError,
    action_space,
    execute,
)
from agentab.mock_shop import (
    MockShopSession,
    ShopSite,
    VariantConfig,
    render_html,
)
from agentab.webdriver_env import (
    BrowserConfig,
    ExtractionRuleset,
    WebDriverClient,
    WebDriverEnv,
    WebDriverError,
    extract,
    load_ruleset,
    open_browser,
    perform,
    post_process,
    reresolve,
    target_selector,
)

from .conftest import FIXTURES, FakeDriver, site_loader, static_loader

FIXTURE_RULES = load_ruleset("fixture_site")
SHOP_RULES = load_ruleset("mockshop")
FIRST = target_selector(FIXTURE_RULES, ClickProduct(index=1))


def page(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def browser(driver: FakeDriver, start: str = "http://fixture.test/home.html") -> WebDriverEnv:
    client = WebDriverClient("http://driver.test", timeout=5, transport=driver.transport)
    config = BrowserConfig(
        driver_endpoint="http://driver.test",
        start_url=start,
        variant="control",
        settle_timeout=1,
        retry_delay=0,
    )
    return WebDriverEnv(config, FIXTURE_RULES, client=client, sleep=lambda _: None)


class TestExtraction:
    def test_results_page(self):
        obs = extract(page("results.html"), FIXTURE_RULES)
        assert obs.page_type == "search_results"
        assert obs.query == "solar filter for telescope"
        assert obs.cart_count == 1
        assert [p.title for p in obs.products] == [
            "Solar Filter for Telescope 80mm Aperture",
            "Full Aperture Solar Filter Sheet",
            "ND1000 Solar Filter for Camera Lens",
        ]
        assert [p.price for p in obs.products] == [55.14, 32.5, 1036.99]
        assert [p.review_count for p in obs.products] == [1284, 2210, 1120]
        assert obs.products[1].rating == 4.7
        assert [g.name for g in obs.filter_groups] == ["Department", "Brand"]
        brand = obs.filter_groups[1]
        assert [(o.value, o.selected) for o in brand.options] == [("Celestron", True), ("Baader", False)]
        assert obs.filter_groups[0].options[1].value == "Camera & Photo"

    def test_sponsored_content_dropped(self):
        assert "Sponsored" not in extract(page("results.html"), FIXTURE_RULES).to_json()

    def test_product_page(self):
        obs = extract(page("product.html"), FIXTURE_RULES)
        assert obs.page_type == "product_detail"
        assert obs.detail.title == "Solar Filter for Telescope 80mm Aperture"
        assert obs.detail.brand == "Celestron"
        assert obs.detail.department == "Telescope"
        assert obs.detail.rating == 4.6
        assert obs.detail.attributes == {"material": "Baader film", "fits": "80mm refractor telescope"}

    def test_home_and_confirmation(self):
        home = extract(page("home.html"), FIXTURE_RULES)
        assert home == Observation(page_type="home")
        confirmation = extract(page("confirmation.html"), FIXTURE_RULES)
        assert confirmation.page_type == "purchase_confirmation"
        assert confirmation.detail.price == 55.14

    def test_unclassifiable(self):
        with pytest.raises(UnclassifiablePageError, match="Blank"):
            extract(page("empty.html"), FIXTURE_RULES)

    @pytest.mark.parametrize(
        "value, post, expected",
        [
            ("  Mini\n  Speaker ", "trim", "Mini Speaker"),
            ("$1,036.99", "parse-price", 1036.99),
            ("4.5 out of 5 stars", "parse-rating", 4.5),
            ("88,410 ratings", "parse-int", 88410),
            ("true", "parse-bool", True),
            ("false", "parse-bool", False),
        ],
    )
    def test_post_processing(self, value, post, expected):
        assert post_process(value, post) == expected

    def test_ruleset_must_cover_detected_pages(self):
        data = FIXTURE_RULES.model_dump()
        del data["field_rules"]["product_title"]
        with pytest.raises(ValueError, match="product_title"):
            ExtractionRuleset.model_validate(data)

    def test_mock_shop_pages_read_back(self, catalog):
        session = MockShopSession(catalog, VariantConfig())
        for action in (
            None,
            Search(query="bluetooth speaker"),
            ClickFilter(group="Price", value="$100 & Above"),
            ClickFilter(group="Brand", value="Sony"),
            ClickProduct(index=1),
            Purchase(),
        ):
            if action is not None:
                execute(session, action)
            obs = session.observe()
            assert extract(render_html(obs), SHOP_RULES) == obs


class TestReresolve:
    def test_product_matched_by_title(self):
        before = extract(page("results.html"), FIXTURE_RULES)
        after = extract(page("results_rerendered.html"), FIXTURE_RULES)
        assert reresolve(ClickProduct(index=1), before, after) == ClickProduct(index=2)
        assert reresolve(ClickProduct(index=3), before, after) is None

    def test_filter_gone(self):
        before = extract(page("results.html"), FIXTURE_RULES)
        after = extract(page("results_rerendered.html"), FIXTURE_RULES)
        assert reresolve(ClickFilter(group="Brand", value="Baader"), before, after) is None


class TestRecovery:
    def setup_session(self, driver: FakeDriver):
        client = WebDriverClient("http://driver.test", timeout=5, transport=driver.transport)
        session = open_browser(
            client,
            BrowserConfig(driver_endpoint="http://driver.test", start_url="http://fixture.test/results.html", variant="v"),
        )
        before = extract(client.page_source(session.session_id), FIXTURE_RULES)
        driver.log.clear()
        return client, session, before

    def run(self, driver: FakeDriver, action=ClickProduct(index=1)):
        client, session, before = self.setup_session(driver)
        delays = []
        result = perform(client, session, action, FIXTURE_RULES, before, retry_delay=0.25, sleep=delays.append)
        return result, delays

    def test_first_time(self):
        driver = FakeDriver(static_loader())
        result, delays = self.run(driver)
        assert result.status == "ok"
        assert delays == []
        assert driver.log == [("find", FIRST), ("click", FIRST)]

    def test_retry(self):
        driver = FakeDriver(static_loader(), flaky={FIRST: 1})
        result, delays = self.run(driver)
        assert result.status == "recovered"
        assert result.strategy == "retry"
        assert delays == [0.25]

    def test_scroll(self):
        driver = FakeDriver(static_loader(), intercepted={FIRST})
        result, _ = self.run(driver)
        assert result.strategy == "scroll"
        assert [kind for kind, _ in driver.log] == [
            "find", "click-failed", "find", "click-failed", "find", "scroll", "click",
        ]

    def test_reparse(self):
        driver = FakeDriver(static_loader(), missing={FIRST}, swap_on_miss="results_rerendered.html")
        result, _ = self.run(driver)
        assert result.strategy == "reparse"
        second = target_selector(FIXTURE_RULES, ClickProduct(index=2))
        assert driver.log[-1] == ("click", second)
        assert "Solar Filter for Telescope 80mm Aperture" in driver.html

    def test_exhausted(self):
        driver = FakeDriver(static_loader(), missing={FIRST})
        with pytest.raises(ExecutionError) as excinfo:
            self.run(driver)
        assert "no such element" in str(excinfo.value.last_error)
        assert [kind for kind, _ in driver.log].count("find") == 4


class TestWebDriverEnv:
    def test_walk_fixture_site(self):
        driver = FakeDriver(static_loader())
        env = browser(driver)
        obs = env.observe()
        assert obs.page_type == "home"
        result = execute(env, Search(query="solar filter for telescope"), action_space(obs))
        assert result.status == "ok"
        assert driver.typed["#twotabsearchtextbox"] == "solar filter for telescope"
        assert env.observe().page_type == "search_results"
        execute(env, ClickProduct(index=2))
        assert env.observe().page_type == "product_detail"
        execute(env, Purchase())
        assert env.observe().page_type == "purchase_confirmation"
        env.close()
        assert driver.deleted == 1

    def test_failure_is_reported(self):
        driver = FakeDriver(static_loader(), missing={FIRST})
        env = browser(driver, start="http://fixture.test/results.html")
        result = env.perform(ClickProduct(index=1), action_space(env.observe()))
        assert result.status == "failed"
        assert "no such element" in result.reason

    def test_settle_gives_up(self):
        driver = FakeDriver(static_loader(), ready_after=1000)
        ticks = itertools.count(0, 0.25)
        slept = []
        client = WebDriverClient("http://driver.test", timeout=5, transport=driver.transport)
        config = BrowserConfig(
            driver_endpoint="http://driver.test", start_url="http://fixture.test/home.html", variant="v", settle_timeout=1
        )
        WebDriverEnv(config, FIXTURE_RULES, client=client, sleep=slept.append, clock=lambda: next(ticks))
        assert 0 < len(slept) < 10

    @pytest.mark.parametrize(("command", "error"), [("/url", WebDriverError), ("/execute/sync", SessionLostError)])
    def test_startup_failure_ends_the_session(self, command, error):
        failure = "invalid session id" if error is SessionLostError else "unknown error"
        driver = FakeDriver(static_loader(), fail={command: failure})
        with pytest.raises(error):
            browser(driver)
        assert driver.sessions == 1
        assert driver.deleted == 1

    def test_session_lost(self):
        driver = FakeDriver(static_loader())
        client = WebDriverClient("http://driver.test", timeout=5, transport=driver.transport)
        with pytest.raises(SessionLostError):
            client.page_source("someone-else")

    def test_drive_mock_shop(self, catalog):
        site = ShopSite(catalog, VariantConfig(filter_mode="reduced", threshold=0.8))
        driver = FakeDriver(site_loader(site))
        client = WebDriverClient("http://driver.test", timeout=5, transport=driver.transport)
        config = BrowserConfig(driver_endpoint="http://driver.test", start_url="http://shop.test/", variant="treatment")
        env = WebDriverEnv(config, SHOP_RULES, client=client, sleep=lambda _: None)
        execute(env, Search(query="solar filter for telescope"))
        obs = env.observe()
        assert obs.page_type == "search_results"
        assert [(g.name, [o.value for o in g.options]) for g in obs.filter_groups] == [("Department", ["Telescope"])]
        execute(env, ClickFilter(group="Department", value="Telescope"))
        obs = env.observe()
        assert obs.filter_groups[0].options[0].selected
        execute(env, ClickProduct(index=1))
        execute(env, Purchase())
        obs = env.observe()
        assert obs.page_type == "purchase_confirmation"
        assert obs.cart_count == 1
