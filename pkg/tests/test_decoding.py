import math

import pytest
from hypothesis import given, strategies as st

from factverify.backends import MockBackend, MockScript, parse_script
from factverify.decoding import (BackendError, DecodeSession, DecodingError, HookAction, RewardConfig,
                                 apply_reward, generate, greedy_step, match_trigger, read_trace,
                                 replay_tokens, write_trace)

CFG = RewardConfig()


def session_with(tokens, hits=0):
    s = DecodeSession()
    s.tokens = list(tokens)
    s.trigger_hits = hits
    return s


def test_match_trigger():
    S = ("Conflict", ":")
    assert not match_trigger([":"], S)
    assert match_trigger(["a", "Conflict", ":"], S)
    assert not match_trigger(["Conflict", ":", "no"], S)
    assert not match_trigger([], S)


def test_reward_sequence_is_exact():
    assert [CFG.reward(i) for i in range(4)] == [20.0, 2.0, 0.2, 0.02]


def test_apply_reward_examples():
    logits = {"yes": 0.0, "no": 3.0}
    s = session_with(["Conflict", ":"])
    out = apply_reward(logits, s, CFG)
    assert out == {"yes": 20.0, "no": 3.0}
    assert s.trigger_hits == 1

    s = session_with(["Conflict", ":"], hits=2)
    assert apply_reward(logits, s, CFG)["yes"] == 0.2
    assert s.trigger_hits == 3

    s = session_with(["Conflict", "x"])
    out = apply_reward(logits, s, CFG)
    assert out == logits and s.trigger_hits == 0


def test_apply_reward_rejects_non_finite():
    with pytest.raises(DecodingError):
        apply_reward({"yes": math.inf}, session_with([]), CFG)


def test_greedy_step_examples():
    assert greedy_step({"a": 1.0, "b": 0.5}) == "a"
    assert greedy_step({"b": 1.0, "a": 1.0}) == "a"
    with pytest.raises(DecodingError):
        greedy_step({})
    # target 0 vs competitor 5: +20 at i=0 flips the choice, +0.2 at i=2 does not
    assert greedy_step({"yes": 0.0 + CFG.reward(0), "no": 5.0}) == "yes"
    assert greedy_step({"yes": 0.0 + CFG.reward(2), "no": 5.0}) == "no"


def test_config_validation():
    for bad in ({"gamma": 0.0}, {"gamma": 1.0}, {"trigger": ()}, {"reward_targets": frozenset()}):
        with pytest.raises(ValueError):
            RewardConfig(**bad)


logit_maps = st.dictionaries(st.sampled_from(["yes", "no", "a", "b", "c"]),
                             st.floats(-50, 50, allow_nan=False), min_size=1)


@given(logit_maps, st.integers(0, 6), st.booleans())
def test_reward_touches_only_targets(logits, hits, triggered):
    s = session_with(["Conflict", ":"] if triggered else ["x"], hits)
    out = apply_reward(logits, s, CFG)
    for tok, v in logits.items():
        if triggered and tok in CFG.reward_targets:
            assert out[tok] == v + CFG.reward(hits)
        else:
            assert out[tok] == v


@given(logit_maps, st.integers(0, 6))
def test_zero_delta_is_identity(logits, hits):
    cfg = RewardConfig(delta0=0.0)
    assert apply_reward(logits, session_with(["Conflict", ":"], hits), cfg) == logits


@given(logit_maps, st.floats(-100, 100, allow_nan=False))
def test_argmax_shift_invariance(logits, c):
    shifted = {k: v + c for k, v in logits.items()}
    # a shift can merge near-ties through rounding; only compare when gaps are resolvable
    vals = sorted(logits.values(), reverse=True)
    if len(vals) > 1 and vals[0] - vals[1] < 1e-9:
        return
    assert greedy_step(shifted) == greedy_step(logits)


@given(st.floats(0.01, 0.99), st.floats(0.1, 1e3))
def test_total_reward_bounded(gamma, delta0):
    cfg = RewardConfig(delta0=delta0, gamma=gamma)
    total = math.fsum(cfg.reward(i) for i in range(200))
    assert total <= delta0 / (1 - gamma) * (1 + 1e-9)


@given(st.floats(1e-3, 50))
def test_finite_hits_until_target_stops_winning(margin):
    # with margin m > 0 some hit index i has reward < m, after which "no" always wins
    i = next(i for i in range(10_000) if CFG.reward(i) < margin)
    for j in range(i, i + 5):
        assert greedy_step({"yes": 0.0 + CFG.reward(j), "no": margin}) == "no"


# ---------------------------------------------------------------------------
# generation on the scripted mock

REFLECT = r"""
think
Conflict
:
no | no:{m},yes:0
\n
done
[again]
rethink
Conflict
:
no | no:{m},yes:0
\n
done
branch "Conflict:yes" -> again
"""


def reflect_backend(margin, tier="logits"):
    return MockBackend(parse_script(REFLECT.replace("{m}", str(margin))), tier)


def test_pass_through_without_triggers():
    backend = MockBackend(MockScript.from_tokens(["a", "b", "c", "d", "e"]))
    tokens, session = generate(backend, "prompt", CFG)
    assert tokens == ["a", "b", "c", "d", "e"]
    assert session.trigger_hits == 0 and session.stop_reason == "eos"


@pytest.mark.parametrize("tier", ["logits", "bias"])
def test_first_hit_forces_reflection(tier):
    # "no" leads by 5 < 20: the first hit emits yes; the second (reward 2) does not
    tokens, session = generate(reflect_backend(5.0, tier), "prompt", CFG)
    text = "".join(tokens)
    assert text.startswith("thinkConflict:yes")
    assert "rethinkConflict:no" in text
    assert session.trigger_hits == 2
    assert session.tier == tier


@pytest.mark.parametrize("tier", ["logits", "bias"])
def test_decay_ends_the_loop(tier):
    # margin 1: yes at i=0 (20) and i=1 (2), no at i=2 (0.2)
    tokens, session = generate(reflect_backend(1.0, tier), "p", RewardConfig(max_reflections=4))
    assert "".join(tokens).count("Conflict:yes") == 2
    assert session.trigger_hits == 3


def test_geometric_decay_over_many_hits():
    # margin 0.01 keeps yes through i=0..2; at i=3 the bonus is 0.02 > 0.01 and at i=4 0.002 < 0.01
    cfg = RewardConfig(max_reflections=10)
    tokens, session = generate(reflect_backend(0.01), "p", cfg)
    assert "".join(tokens).count("Conflict:yes") == 4
    rewards = [e["bonus"] for e in session.events if e["event"] == "reward"]
    assert rewards == [20.0, 2.0, 0.2, 0.02, 0.002]

    # margin 1.0 on the 4th hit (i=3, bonus 0.02): no wins
    assert greedy_step({"yes": 0.0 + cfg.reward(3), "no": 1.0}) == "no"


def test_reflection_cap_stops_rewards():
    # margin 0.01 would keep reflecting; with a cap of 3, the 4th trigger is unrewarded
    tokens, session = generate(reflect_backend(0.01), "p", RewardConfig(max_reflections=3))
    assert session.trigger_hits == 3
    assert "".join(tokens).count("Conflict:yes") == 3
    assert "".join(tokens).endswith("Conflict:no\ndone")


def test_length_cap_is_flagged():
    backend = MockBackend(MockScript.from_tokens(list("abcdefgh")))
    tokens, session = generate(backend, "p", CFG, max_tokens=3)
    assert tokens == ["a", "b", "c"]
    assert session.length_capped and session.stop_reason == "length"


class StopAfter:
    def __init__(self, n):
        self.n = n

    def on_token(self, session, token):
        return HookAction("stop") if len(session.tokens) >= self.n else None


def test_hook_stop_and_splice():
    backend = MockBackend(MockScript.from_tokens(list("abcdef")))
    tokens, session = generate(backend, "p", CFG, hooks=[StopAfter(2)])
    assert tokens == ["a", "b"] and session.stop_reason == "hook"

    script = parse_script('ask\nx\n[after]\ngot\nit\nbranch "<E>" -> after')

    class Splicer:
        def on_token(self, session, token):
            return HookAction("splice", "<E>") if token == "ask" else None

    tokens, session = generate(MockBackend(script), "p", CFG, hooks=[Splicer()])
    assert tokens == ["ask", "got", "it"]
    assert {"event": "splice", "text": "<E>"} in session.events


class Exploding:
    tier = "logits"

    def open_session(self):
        return self

    def stream(self, context, bias, max_tokens):
        yield from []
        raise BackendError("boom")


def test_backend_failure_keeps_partial():
    class Partial(Exploding):
        def stream(self, context, bias, max_tokens):
            from factverify.decoding import StepOutput
            yield StepOutput("hel", {"hel": 0.0})
            yield StepOutput("lo", {"lo": 0.0})
            raise BackendError("connection reset")

    with pytest.raises(BackendError) as err:
        generate(Partial(), "p", CFG)
    assert err.value.partial == "hello"


def test_trace_round_trip(tmp_path):
    tokens, session = generate(reflect_backend(5.0), "p", CFG)
    write_trace(session, tmp_path / "t.jsonl")
    header, events = read_trace(tmp_path / "t.jsonl")
    assert header["trigger_hits"] == 2
    assert replay_tokens(events) == tokens
    rewards = [e for e in events if e["event"] == "reward"]
    assert [r["bonus"] for r in rewards] == [20.0, 2.0]


def test_mock_is_deterministic():
    runs = [generate(reflect_backend(1.5, tier), "p", CFG)[0] for tier in ("logits", "logits", "bias")]
    assert runs[0] == runs[1] == runs[2]
