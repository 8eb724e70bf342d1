"""
VNF lifecycle state machine and static chain validation.

Both functions are pure: they read immutable values and return new ones, so any number
of concurrent callers may use them.
"""

from typing import Dict, List, Mapping, Tuple

from .errors import IllegalTransition
from .types import LifecycleEvent, LifecycleState, ServiceChain

_S = LifecycleState
_E = LifecycleEvent

_NON_ABSORBING = (_S.REQUESTED, _S.INSTANTIATED, _S.MIGRATING, _S.RUNNING)

_TRANSITIONS: Dict[Tuple[LifecycleState, LifecycleEvent], LifecycleState] = {
    (_S.REQUESTED, _E.INSTANTIATE_DONE): _S.INSTANTIATED,
    (_S.INSTANTIATED, _E.MIGRATE_CMD): _S.MIGRATING,
    (_S.MIGRATING, _E.MIGRATE_DONE): _S.RUNNING,
    # update is a configuration change, not a state
    (_S.RUNNING, _E.UPDATE_CMD): _S.RUNNING,
}
for _state in _NON_ABSORBING:
    _TRANSITIONS[(_state, _E.TERMINATE_CMD)] = _S.TERMINATED
    _TRANSITIONS[(_state, _E.FAULT)] = _S.FAILED


def lifecycle_next(state: LifecycleState, event: LifecycleEvent) -> LifecycleState:
    """Return the successor of ``state`` under ``event``; raise IllegalTransition otherwise."""
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(
            f"Lifecycle event {event.value} not allowed from {state.value}"
        ) from None


def legal_transitions() -> Mapping[Tuple[LifecycleState, LifecycleEvent], LifecycleState]:
    """Read-only view of the transition table."""
    return dict(_TRANSITIONS)


def validate_chain(chain: ServiceChain) -> List[str]:
    """
    Check every ServiceChain invariant. Returns the violated invariants by name;
    an empty list means the chain is valid.
    """
    violations: List[str] = []

    if not chain.domain.is_vwsn:
        violations.append(f"chain domain: {chain.domain.value} is not a VWSN domain")

    if len(chain.stages) != 2:
        violations.append(f"stage count: expected 2 stages, found {len(chain.stages)}")
        return violations

    first, second = chain.stages
    if not (first.vnf_type.is_info_model_processor and second.vnf_type.is_protocol_converter):
        violations.append(
            f"stage order: expected [IMP, PC], "
            f"found [{first.vnf_type.value}, {second.vnf_type.value}]"
        )

    mismatched = [
        stage.vnf_type.value for stage in chain.stages if stage.vnf_type.domain is not chain.domain
    ]
    if mismatched:
        violations.append(
            f"domain suffix mismatch: {', '.join(mismatched)} cannot serve {chain.domain.value}"
        )

    idle = [
        stage.instance_id for stage in chain.stages if stage.state is not LifecycleState.RUNNING
    ]
    if idle:
        violations.append(f"stage not running: {', '.join(idle)}")

    return violations

