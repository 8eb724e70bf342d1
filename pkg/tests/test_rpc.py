import orjson
import pytest

from nfvgw.errors import GatewayError, InsufficientCapacity, ScenarioFailed
from nfvgw.rpc import RpcClient, RpcEndpoint, RpcError, rebuild_error


@pytest.fixture
def endpoint():
    rpc = RpcEndpoint("vwsn1-mano")
    rpc.register("echo", lambda params: params)

    def refuse(params):
        raise InsufficientCapacity(f"{params['node']} is full")

    rpc.register("allocate", refuse)
    return rpc


def test_call_round_trips_params(endpoint):
    assert endpoint.call("echo", {"instance_id": "vnf-0001"}) == {"instance_id": "vnf-0001"}
    assert endpoint.call("echo") == {}
    assert endpoint.calls == 2


def test_errors_come_back_as_their_own_type(endpoint):
    with pytest.raises(InsufficientCapacity, match="n1 is full"):
        endpoint.call("allocate", {"node": "n1"})


def test_unknown_method_and_malformed_frames(endpoint):
    with pytest.raises(GatewayError, match="unknown method"):
        endpoint.call("migrate")
    reply = orjson.loads(endpoint.dispatch(b"[1, 2]"))
    assert reply == {"id": None, "error": {"code": "rpc_error", "message": "malformed request"}}


def test_methods_register_once(endpoint):
    with pytest.raises(ValueError):
        endpoint.register("echo", print)


def test_rebuild_error_falls_back_for_unknown_or_awkward_codes():
    unknown = rebuild_error("no_such_code", "boom")
    assert type(unknown) is GatewayError
    awkward = rebuild_error(ScenarioFailed.code, "boom")
    assert awkward.code == "scenario_failed"


async def test_local_client_goes_through_the_frames(endpoint):
    client = endpoint.client()
    assert await client.call("echo", {"node_id": "vwsn1-node-1"}) == {"node_id": "vwsn1-node-1"}
    with pytest.raises(InsufficientCapacity):
        await client.call("allocate", {"node": "n2"})
    assert client.calls == 2


async def test_client_checks_the_reply_id(endpoint):
    async def stale(frame):
        return orjson.dumps({"id": 99, "result": {}})

    async def garbled(frame):
        return b"<html>bad gateway</html>"

    with pytest.raises(RpcError, match="does not match"):
        await RpcClient("vwsn2-mano", stale).call("echo")
    with pytest.raises(RpcError, match="unreadable reply"):
        await RpcClient("vwsn2-mano", garbled).call("echo")
