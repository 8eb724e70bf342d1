import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from nfvgw.errors import IllegalTransition
from nfvgw.lifecycle import legal_transitions, lifecycle_next, validate_chain
from nfvgw.types import DomainId, LifecycleEvent, LifecycleState, ServiceChain, VNFType

from .conftest import make_instance

S = LifecycleState
E = LifecycleEvent

EXPECTED = {
    (S.REQUESTED, E.INSTANTIATE_DONE): S.INSTANTIATED,
    (S.INSTANTIATED, E.MIGRATE_CMD): S.MIGRATING,
    (S.MIGRATING, E.MIGRATE_DONE): S.RUNNING,
    (S.RUNNING, E.UPDATE_CMD): S.RUNNING,
    (S.REQUESTED, E.TERMINATE_CMD): S.TERMINATED,
    (S.INSTANTIATED, E.TERMINATE_CMD): S.TERMINATED,
    (S.MIGRATING, E.TERMINATE_CMD): S.TERMINATED,
    (S.RUNNING, E.TERMINATE_CMD): S.TERMINATED,
    (S.REQUESTED, E.FAULT): S.FAILED,
    (S.INSTANTIATED, E.FAULT): S.FAILED,
    (S.MIGRATING, E.FAULT): S.FAILED,
    (S.RUNNING, E.FAULT): S.FAILED,
}

ILLEGAL = [(state, event) for state in S for event in E if (state, event) not in EXPECTED]


def test_transition_table_is_exact():
    assert legal_transitions() == EXPECTED
    assert len(legal_transitions()) == 12


@pytest.mark.parametrize("state,event", list(EXPECTED))
def test_legal_transitions(state, event):
    assert lifecycle_next(state, event) is EXPECTED[(state, event)]


@pytest.mark.parametrize("state,event", ILLEGAL)
def test_illegal_transitions_raise(state, event):
    with pytest.raises(IllegalTransition):
        lifecycle_next(state, event)


def test_legal_transitions_returns_a_copy():
    table = legal_transitions()
    table[(S.TERMINATED, E.INSTANTIATE_DONE)] = S.RUNNING
    with pytest.raises(IllegalTransition):
        lifecycle_next(S.TERMINATED, E.INSTANTIATE_DONE)


@settings(max_examples=100_000, deadline=None)
@given(st.lists(st.sampled_from(list(LifecycleEvent)), max_size=30))
def test_absorbing_states_are_never_left(events):
    state = S.REQUESTED
    for event in events:
        try:
            following = lifecycle_next(state, event)
        except IllegalTransition:
            assert (state, event) not in EXPECTED
            continue
        if state.is_absorbing:
            pytest.fail(f"left absorbing state {state.value}")
        state = following


@given(st.sampled_from([S.TERMINATED, S.FAILED]), st.sampled_from(list(LifecycleEvent)))
def test_no_event_leaves_an_absorbing_state(state, event):
    with pytest.raises(IllegalTransition):
        lifecycle_next(state, event)


def _chain(domain, *types, state=S.RUNNING):
    stages = tuple(make_instance(t, f"vnf-{i}", state) for i, t in enumerate(types))
    return ServiceChain("chain-1", domain, stages)


@pytest.mark.parametrize("domain", [DomainId.VWSN1, DomainId.VWSN2])
def test_static_chain_is_valid(domain):
    chain = _chain(domain, *VNFType.chain_for(domain))
    assert validate_chain(chain) == []


def test_reversed_stages_violate_order():
    chain = _chain(DomainId.VWSN1, VNFType.PROTOCOL_CONVERTER_1, VNFType.INFO_MODEL_PROCESSOR_1)
    violations = validate_chain(chain)
    assert len(violations) == 1
    assert violations[0].startswith("stage order")


def test_foreign_stage_violates_domain_suffix():
    chain = _chain(DomainId.VWSN1, VNFType.INFO_MODEL_PROCESSOR_2, VNFType.PROTOCOL_CONVERTER_1)
    violations = validate_chain(chain)
    assert any(v.startswith("domain suffix mismatch") for v in violations)
    assert "IMP2" in violations[0]


def test_idle_stage_is_reported():
    chain = _chain(
        DomainId.VWSN2,
        VNFType.INFO_MODEL_PROCESSOR_2,
        VNFType.PROTOCOL_CONVERTER_2,
        state=S.MIGRATING,
    )
    assert validate_chain(chain) == ["stage not running: vnf-0, vnf-1"]


def test_wrong_stage_count_is_reported():
    chain = _chain(DomainId.VWSN1, VNFType.INFO_MODEL_PROCESSOR_1)
    assert validate_chain(chain) == ["stage count: expected 2 stages, found 1"]


def test_chain_outside_vwsn_domains_is_reported():
    chain = _chain(
        DomainId.GATEWAY_PROVIDER, VNFType.INFO_MODEL_PROCESSOR_1, VNFType.PROTOCOL_CONVERTER_1
    )
    violations = validate_chain(chain)
    assert violations[0].startswith("chain domain")
