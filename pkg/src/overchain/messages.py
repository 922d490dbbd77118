"""Payload types delivered through the simulated network, plus a small
request/response helper shared by all actors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .ledger import Block, Transaction


@dataclass(frozen=True)
class TxMessage:
    """A transaction in flight to a block manager. ``origin_member`` is the
    submitting cluster member's id, or None when relayed by a peer manager."""

    tx: Transaction
    origin_member: Optional[str]


@dataclass(frozen=True)
class BlockMessage:
    block: Block
    sender: str


@dataclass(frozen=True)
class DeliverTx:
    """Manager-to-member delivery of a transaction whose key pair matched one
    of the member's access entries. For a pending multisig this doubles as the
    countersign request."""

    tx: Transaction
    from_manager: str


@dataclass(frozen=True)
class UpdateNotice:
    """Manager-to-member announcement of a fully signed software update."""

    tx: Transaction
    from_manager: str


@dataclass(frozen=True)
class Timer:
    kind: str
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AppRequest:
    request_id: int
    sender: str
    kind: str
    data: dict


@dataclass(frozen=True)
class AppResponse:
    request_id: int
    kind: str
    data: dict


class BaseActor:
    """Shared actor behavior: request/response correlation and dispatch.

    Subclasses implement ``on_timer`` / ``on_request`` / ``on_payload`` as
    needed. Replies to in-flight requests resume the continuation captured at
    send time, in delivery order.
    """

    def __init__(self, node_id: str):
        self.node_id = node_id
        self._continuations: dict[int, Callable] = {}

    def send_request(self, engine, target: str, kind: str, data: dict,
                     then: Callable) -> int:
        request_id = engine.next_request_id()
        self._continuations[request_id] = then
        engine.send(self.node_id, target, AppRequest(request_id, self.node_id, kind, data))
        return request_id

    def reply(self, engine, request: AppRequest, data: dict) -> None:
        engine.send(self.node_id, request.sender, AppResponse(request.request_id, request.kind, data))

    def handle(self, engine, payload) -> None:
        if isinstance(payload, AppResponse):
            cont = self._continuations.pop(payload.request_id, None)
            if cont is not None:
                cont(engine, payload.data)
        elif isinstance(payload, AppRequest):
            self.on_request(engine, payload)
        elif isinstance(payload, Timer):
            self.on_timer(engine, payload)
        else:
            self.on_payload(engine, payload)

    def cloud_call(self, engine, cloud_id: str, account, kind: str, data: dict,
                   then: Callable) -> None:
        """Challenge-response authentication followed by one storage
        operation; ``then`` receives the final response dict (carrying
        "error" on any failure, including the authentication steps)."""
        account_id, account_key = account

        def on_nonce(eng, resp):
            if "error" in resp:
                then(eng, resp)
                return
            proof = account_key.sign(bytes.fromhex(resp["nonce"]))
            self.send_request(eng, cloud_id, "cloud_proof",
                              {"account": account_id, "nonce": resp["nonce"],
                               "proof": proof.hex()},
                              on_session)

        def on_session(eng, resp):
            if "error" in resp:
                then(eng, resp)
                return
            self.send_request(eng, cloud_id, kind,
                              dict(data, session=resp["session"]), then)

        self.send_request(engine, cloud_id, "cloud_auth",
                          {"account": account_id}, on_nonce)

    def on_request(self, engine, request: AppRequest) -> None:
        raise NotImplementedError(f"{self.node_id} cannot serve {request.kind!r}")

    def on_timer(self, engine, timer: Timer) -> None:
        raise NotImplementedError(f"{self.node_id} has no timer {timer.kind!r}")

    def on_payload(self, engine, payload) -> None:
        raise NotImplementedError(f"{self.node_id} cannot handle {type(payload).__name__}")
