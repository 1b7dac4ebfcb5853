import httpx
import pytest
from pydantic import ValidationError

from agentab.agent import AgentState, build_prompt
from agentab.environment import (
    FilterGroup,
    FilterOption,
    Observation,
    ProductSummary,
    action_space,
)
from agentab.model_client import (
    ChatContext,
    HttpModelClient,
    Message,
    ModelConfig,
    ModelTransportError,
    PolicyRule,
    ScriptedModelClient,
    ScriptedPolicy,
    chat_completion,
    scripted_chat,
    template_values,
)

from .conftest import buyer_policy, make_persona

MESSAGES = [Message(role="user", content="Hello")]


def completion(text: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def config(**kwargs) -> ModelConfig:
    return ModelConfig(
        endpoint="http://model.test/v1/chat/completions",
        model_name="test-model",
        backoff_initial=0.5,
        backoff_base=2,
        retries=3,
        **kwargs,
    )


class TestChatCompletion:
    def run(self, responses, **kwargs):
        requests = []
        replies = iter(responses)

        def handler(request):
            requests.append(request)
            return next(replies)

        delays = []
        client = httpx.Client(transport=httpx.MockTransport(handler))
        result = chat_completion(MESSAGES, config(**kwargs), client, sleep=delays.append)
        return result, requests, delays

    def test_success(self):
        result, requests, delays = self.run([completion("stop")])
        assert result.text == "stop"
        assert result.retries == 0
        assert delays == []
        body = requests[0].read()
        assert b'"model":"test-model"' in body.replace(b" ", b"")

    def test_transient_failures_back_off(self):
        result, requests, delays = self.run(
            [httpx.Response(429), httpx.Response(503), completion("purchase")]
        )
        assert result.text == "purchase"
        assert result.retries == 2
        assert delays == [0.5, 1.0]

    def test_gives_up_after_retries(self):
        with pytest.raises(ModelTransportError, match="HTTP 500"):
            self.run([httpx.Response(500)] * 4)

    def test_client_errors_are_not_retried(self):
        with pytest.raises(ModelTransportError, match="HTTP 400"):
            self.run([httpx.Response(400, text="bad request"), completion("never")])

    def test_malformed_payload(self):
        with pytest.raises(ModelTransportError, match="Malformed"):
            self.run([httpx.Response(200, json={"choices": []})])

    def test_api_key_from_environment(self, monkeypatch):
        monkeypatch.setenv("AGENTAB_API_KEY", "sekrit")
        _, requests, _ = self.run([completion("stop")])
        assert requests[0].headers["Authorization"] == "Bearer sekrit"

    def test_empty_messages(self):
        with pytest.raises(ValueError):
            chat_completion([], config())

    def test_http_client(self):
        client = HttpModelClient(
            config(), transport=httpx.MockTransport(lambda _: completion("stop")), sleep=lambda _: None
        )
        assert client.complete(MESSAGES) == "stop"
        client.close()

    def test_http_client_closes_on_exit(self):
        with HttpModelClient(config(), transport=httpx.MockTransport(lambda _: completion("stop"))) as client:
            assert client.complete(MESSAGES) == "stop"
        assert client._http.is_closed


class TestMessages:
    def test_user_message_needs_content(self):
        with pytest.raises(ValidationError):
            Message(role="user", content="  ")

    def test_assistant_may_be_empty(self):
        assert Message(role="assistant", content="").content == ""


def results_page() -> Observation:
    return Observation(
        page_type="search_results",
        query="solar filter for telescope",
        products=(
            ProductSummary(index=1, title="Big Filter", price=120, rating=4.9, review_count=10),
            ProductSummary(index=2, title="Sheet", price=32.5, rating=4.2, review_count=10),
            ProductSummary(index=3, title="Card", price=14.95, rating=4.5, review_count=10),
        ),
        filter_groups=(
            FilterGroup(name="Brand", options=(FilterOption(value="Baader", selected=True), FilterOption(value="Soluna"))),
        ),
    )


def prompt(intention, obs: Observation) -> list[Message]:
    state = AgentState(persona=make_persona(1), intention=intention, arm="control")
    return build_prompt(state, obs, action_space(obs))


class TestScriptedPolicy:
    def test_needs_fallback_rule(self):
        with pytest.raises(ValidationError):
            ScriptedPolicy(rules=(PolicyRule(when={"page_type": "home"}, actions=("stop",)),))

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            PolicyRule(actions=("purchase", "stop"), weights=(0.5, 0.6))

    def test_several_actions_need_weights(self):
        with pytest.raises(ValidationError):
            PolicyRule(actions=("purchase", "stop"))

    def test_template_values(self, intention):
        messages = prompt(intention, results_page())
        values = template_values(results_page(), messages)
        assert values == {
            "query": "solar filter for telescope",
            "first_filter": "Brand: Soluna",
            "affordable_index": "2",
            "top_rated_index": "1",
        }

    def test_first_matching_rule(self, intention):
        reply = scripted_chat(buyer_policy(), prompt(intention, Observation(page_type="home")))
        assert reply == 'Thought: find it.\nAction: search("solar filter for telescope")'
        reply = scripted_chat(buyer_policy(), prompt(intention, results_page()))
        assert reply == "click_product(2)"

    def test_rule_skipped_when_value_missing(self, intention):
        broke = intention.model_copy(update={"budget_limit": 5.0})
        reply = scripted_chat(buyer_policy(), prompt(broke, results_page()))
        assert reply == "click_product(1)"

    def test_replays_exactly(self, intention):
        obs = Observation(page_type="product_detail")
        messages = prompt(intention, obs)
        policy = buyer_policy(purchase=0.5, seed=9)

        def replies(session):
            return [scripted_chat(policy, messages, ChatContext(session, step, 1)) for step in range(40)]

        assert replies("a") == replies("a")
        assert set(replies("a")) == {"purchase", "stop"}
        assert replies("a") != replies("b")

    def test_purchase_rate(self, intention):
        messages = prompt(intention, Observation(page_type="product_detail"))
        policy = buyer_policy(purchase=0.8)
        replies = [scripted_chat(policy, messages, ChatContext(f"session-{n}", 2)) for n in range(500)]
        assert set(replies) == {"purchase", "stop"}
        assert replies.count("purchase") / 500 == pytest.approx(0.8, abs=0.05)

    def test_client(self, intention):
        client = ScriptedModelClient(buyer_policy())
        assert client.complete(prompt(intention, Observation(page_type="purchase_confirmation"))) == "stop"

    def test_needs_observation_in_prompt(self):
        with pytest.raises(ValueError):
            scripted_chat(buyer_policy(), MESSAGES)
