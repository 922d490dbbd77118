"""Cluster-head block manager: transaction admission and routing by key-pair
access entries, pooling, scheduled block generation, trust-weighted block
validation, and throughput adjustment.

Routing summary for an arriving transaction:
  - integrity failure (structure/signatures)            -> dropped (invalid)
  - already seen                                        -> dropped (duplicate)
  - predecessor not yet known                           -> parked until it is
  - key-pair matches an access entry                    -> delivered to member
  - fully signed                                        -> pooled for a block
  - origin is a cluster member                          -> broadcast to peers
  - relayed, no match, not poolable                     -> dropped (no_match)
A fully signed software-update transaction additionally notifies vehicle
members, gated on the countersigner holding a verifiable certificate.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .crypto import (
    ZERO_DIGEST,
    Certificate,
    Digest,
    KeyPair,
    PublicKey,
    digest as _digest,
    generate_keypair,
    verify_certificate,
)
from .ledger import (
    Block,
    Chain,
    PayloadTag,
    ThroughputState,
    Transaction,
    TrustTable,
    TxKind,
    append_block,
    build_transaction,
    check_integrity,
    form_block,
)
from .ledger import validate_block as _validate_block
from .messages import (
    AppRequest,
    BaseActor,
    BlockMessage,
    DeliverTx,
    TxMessage,
    UpdateNotice,
)


@dataclass(frozen=True)
class KeyListEntry:
    """Access entry uploaded by a member: the named requester key may exchange
    transactions with the member's key, delivered to ``member_id``."""

    requester_pk: PublicKey
    member_pk: PublicKey
    member_id: str


class KeyList:
    """Ordered collection of access entries with pair matching in both
    orientations."""

    def __init__(self) -> None:
        self.entries: list[KeyListEntry] = []

    def add(self, entry: KeyListEntry) -> bool:
        if entry in self.entries:
            return False
        self.entries.append(entry)
        return True

    def remove_member(self, member_id: str) -> int:
        before = len(self.entries)
        self.entries = [e for e in self.entries if e.member_id != member_id]
        return before - len(self.entries)

    def entries_for(self, member_id: str) -> list[KeyListEntry]:
        return [e for e in self.entries if e.member_id == member_id]

    def matches(self, pk_1: PublicKey, pk_2: Optional[PublicKey]) -> list[KeyListEntry]:
        if pk_2 is None:
            return []
        hits = []
        for e in self.entries:
            if (e.requester_pk, e.member_pk) in ((pk_1, pk_2), (pk_2, pk_1)):
                hits.append(e)
        return hits


class BlockManager(BaseActor):
    """One overlay cluster head."""

    def __init__(
        self,
        node_id: str,
        keypair: KeyPair,
        *,
        block_size: int = 10,
        block_period: float = 10.0,
        min_check_fraction: float = 0.1,
        trust_ramp: int = 5,
        utilization_low: float = 0.5,
        utilization_high: float = 1.0,
        period_min: float = 1.0,
        period_max: float = 120.0,
        pending_timeout: float = 60.0,
        ca_pk: Optional[PublicKey] = None,
        notify_requires_certificate: bool = True,
        corrupt_periods: tuple = (),
    ):
        super().__init__(node_id)
        self.keypair = keypair
        self.chain = Chain()
        self.trust = TrustTable(min_check_fraction, trust_ramp)
        self.throughput = ThroughputState(
            block_period=block_period,
            block_size=block_size,
            utilization_low=utilization_low,
            utilization_high=utilization_high,
            period_min=period_min,
            period_max=period_max,
        )
        self.pending_timeout = pending_timeout
        self.ca_pk = ca_pk
        self.notify_requires_certificate = notify_requires_certificate
        self.corrupt_periods = set(corrupt_periods)

        self.peers: list[str] = []
        self.manager_count = 1
        self.manager_names: dict[PublicKey, str] = {}
        self.members: dict[str, str] = {}  # member id -> kind ("vehicle"/"service")
        self.key_list = KeyList()
        self.certified: dict[PublicKey, Certificate] = {}

        self.pool: list[Transaction] = []
        self._pool_ids: set[Digest] = set()
        self.seen_tids: set[Digest] = set()
        self.waiting: dict[Digest, tuple[Transaction, Optional[str], float]] = {}

        self.drops = {"invalid": 0, "duplicate": 0, "no_match": 0}
        self.delivered_count = 0
        self.blocks_appended = 0
        self._window_count = 0
        self._last_tick_at = 0.0

    # -- membership and key lists ---------------------------------------------

    def add_member(self, member_id: str, kind: str = "vehicle") -> None:
        self.members[member_id] = kind

    def remove_member(self, member_id: str) -> None:
        self.members.pop(member_id, None)

    def upload_key_pair(
        self, trace, now: float, member_id: str,
        requester_pk: PublicKey, member_pk: PublicKey,
    ) -> bool:
        """Record an access entry for a cluster member; idempotent."""
        if member_id not in self.members:
            trace.emit(now, self.node_id, "key_upload_rejected", member=member_id)
            return False
        added = self.key_list.add(KeyListEntry(requester_pk, member_pk, member_id))
        if added:
            trace.emit(now, self.node_id, "key_uploaded", member=member_id,
                       requester_pk=requester_pk.hex()[:16], member_pk=member_pk.hex()[:16])
        return added

    def remove_member_keys(self, trace, now: float, member_id: str) -> int:
        removed = self.key_list.remove_member(member_id)
        trace.emit(now, self.node_id, "keys_removed", member=member_id, removed=removed)
        return removed

    def generator_name(self, pk: PublicKey) -> str:
        return self.manager_names.get(pk, pk.hex()[:12])

    # -- dispatch ---------------------------------------------------------------

    def on_payload(self, engine, payload) -> None:
        if isinstance(payload, TxMessage):
            self.receive_transaction(engine, payload.tx, payload.origin_member)
        elif isinstance(payload, BlockMessage):
            self.on_block(engine, payload.block)
        else:
            super().on_payload(engine, payload)

    def on_request(self, engine, request: AppRequest) -> None:
        if request.kind == "join_cluster":
            member = request.sender
            self.add_member(member, request.data.get("member_kind", "vehicle"))
            for req_hex, member_hex in request.data.get("entries", []):
                self.upload_key_pair(
                    engine.trace, engine.now, member,
                    PublicKey.from_hex(req_hex), PublicKey.from_hex(member_hex))
            engine.trace.emit(engine.now, self.node_id, "member_joined", member=member)
            self.reply(engine, request, {"ok": True})
        elif request.kind == "leave_cluster":
            member = request.sender
            self.remove_member_keys(engine.trace, engine.now, member)
            self.remove_member(member)
            engine.trace.emit(engine.now, self.node_id, "member_left", member=member)
            self.reply(engine, request, {"ok": True})
        elif request.kind == "upload_keys":
            added = 0
            for req_hex, member_hex in request.data.get("entries", []):
                if self.upload_key_pair(
                        engine.trace, engine.now, request.sender,
                        PublicKey.from_hex(req_hex), PublicKey.from_hex(member_hex)):
                    added += 1
            self.reply(engine, request, {"ok": request.sender in self.members,
                                         "added": added})
        elif request.kind == "chain_lookup":
            tx = self.chain.get_tx(Digest.from_hex(request.data["t_id"]))
            self.reply(engine, request, {"tx": tx.to_json_obj() if tx else None})
        else:
            super().on_request(engine, request)

    # -- transaction admission and routing ---------------------------------------

    def receive_transaction(self, engine, tx: Transaction, origin_member: Optional[str]) -> None:
        tid = tx.t_id
        if tid in self.seen_tids or tid in self.waiting:
            self._drop(engine, tx, "duplicate", "")
            return
        verdict = check_integrity(tx)
        if not verdict.ok:
            self._drop(engine, tx, "invalid", verdict.detail)
            return
        if not self._predecessor_known(tx):
            self.waiting[tid] = (tx, origin_member, engine.now + self.pending_timeout)
            engine.trace.emit(engine.now, self.node_id, "tx_parked", t_id=tid.hex())
            return
        self._admit(engine, tx, origin_member)

    def _predecessor_known(self, tx: Transaction) -> bool:
        p = tx.p_t_id
        return p == ZERO_DIGEST or p in self.chain.tx_index or p in self._pool_ids

    def _drop(self, engine, tx: Transaction, reason: str, detail: str) -> None:
        self.drops[reason] += 1
        engine.trace.emit(engine.now, self.node_id, "tx_dropped",
                          t_id=tx.t_id.hex(), reason=reason, detail=detail)

    def _admit(self, engine, tx: Transaction, origin_member: Optional[str]) -> None:
        self.seen_tids.add(tx.t_id)
        sinks = 0

        if tx.fully_signed:
            self.pool.append(tx)
            self._pool_ids.add(tx.t_id)
            self._window_count += 1
            engine.trace.emit(engine.now, self.node_id, "tx_pooled",
                              t_id=tx.t_id.hex(), origin="member" if origin_member else "peer")
            sinks += 1

        for entry in self.key_list.matches(tx.pk_1, tx.pk_2):
            self.delivered_count += 1
            engine.trace.emit(engine.now, self.node_id, "tx_delivered",
                              t_id=tx.t_id.hex(), member=entry.member_id,
                              pending=not tx.fully_signed)
            engine.send(self.node_id, entry.member_id, DeliverTx(tx, self.node_id))
            sinks += 1

        if tx.fully_signed and tx.payload_tag is PayloadTag.SW_UPDATE:
            self._notify_update(engine, tx)

        if origin_member is not None and self.peers:
            engine.trace.emit(engine.now, self.node_id, "tx_broadcast", t_id=tx.t_id.hex())
            for peer in self.peers:
                engine.send(self.node_id, peer, TxMessage(tx, origin_member=None))
            sinks += 1

        if sinks == 0:
            # terminal: nothing consumed it and it has nowhere further to go
            self.seen_tids.discard(tx.t_id)
            self._drop(engine, tx, "no_match", "")
            return

        if tx.fully_signed:
            self._unpark(engine, tx.t_id)

    def _notify_update(self, engine, tx: Transaction) -> None:
        if self.notify_requires_certificate:
            cert = self.certified.get(tx.pk_2)
            if cert is None or self.ca_pk is None or not verify_certificate(cert, self.ca_pk):
                engine.trace.emit(engine.now, self.node_id, "notify_suppressed",
                                  t_id=tx.t_id.hex(), reason="uncertified_countersigner")
                return
        for member_id, kind in self.members.items():
            if kind == "vehicle":
                engine.trace.emit(engine.now, self.node_id, "update_notified",
                                  t_id=tx.t_id.hex(), member=member_id)
                engine.send(self.node_id, member_id, UpdateNotice(tx, self.node_id))

    def _unpark(self, engine, new_tid: Digest) -> None:
        """Admit any parked transactions whose predecessor just became known."""
        ready = [tid for tid, (tx, _, _) in self.waiting.items() if tx.p_t_id == new_tid]
        for tid in ready:
            tx, origin, _ = self.waiting.pop(tid)
            engine.trace.emit(engine.now, self.node_id, "tx_unparked", t_id=tid.hex())
            if tid in self.seen_tids or tid in self.chain.tx_index:
                self._drop(engine, tx, "duplicate", "arrived via block first")
                continue
            self._admit(engine, tx, origin)

    def expire_waiting(self, engine, expire_all: bool = False) -> None:
        stale = [tid for tid, (_, _, deadline) in self.waiting.items()
                 if expire_all or deadline <= engine.now]
        for tid in stale:
            tx, _, _ = self.waiting.pop(tid)
            self._drop(engine, tx, "invalid", "missing_predecessor")

    # -- block generation and validation -----------------------------------------

    def tick(self, engine, period_index: int, turn_id: str) -> None:
        """One block period boundary: adjust throughput, then generate if it is
        this manager's turn."""
        elapsed = engine.now - self._last_tick_at
        rate = self._window_count / elapsed if elapsed > 0 else 0.0
        utilization = self.throughput.adjust(rate, self.manager_count)
        engine.trace.emit(engine.now, self.node_id, "throughput",
                          period=period_index, rate=rate, utilization=utilization,
                          band=[self.throughput.utilization_low,
                                self.throughput.utilization_high],
                          block_period=self.throughput.block_period,
                          pool_depth=len(self.pool), turn=turn_id == self.node_id)
        self._window_count = 0
        self._last_tick_at = engine.now
        self.expire_waiting(engine)
        if turn_id != self.node_id:
            return
        if period_index in self.corrupt_periods:
            self._emit_corrupt_block(engine, period_index)
            return
        self._generate(engine, flush=False)

    def flush_turn(self, engine) -> bool:
        """End-of-run turn: drain remaining pooled transactions into a
        possibly shorter block. Returns True if a block was produced."""
        return self._generate(engine, flush=True)

    def _generate(self, engine, flush: bool) -> bool:
        block = form_block(self.pool, self.chain, self.keypair,
                           self.throughput.block_size, flush=flush)
        if block is None:
            return False
        self._pool_ids = {tx.t_id for tx in self.pool}
        append_block(self.chain, block)
        self.blocks_appended += 1
        engine.trace.emit(engine.now, self.node_id, "block_formed",
                          block_id=block.block_id.hex(), height=block.height,
                          n_tx=len(block.transactions), flush=flush)
        for peer in self.peers:
            engine.send(self.node_id, peer, BlockMessage(block, self.node_id))
        for tx in block.transactions:
            self._unpark(engine, tx.t_id)
        return True

    def _emit_corrupt_block(self, engine, period_index: int) -> None:
        """Broadcast a block with a bad generator signature (not appended
        locally); exists to exercise peers' trust reset."""
        junk_key = generate_keypair(f"{self.node_id}:junk:{period_index}")
        junk_tx = build_transaction(
            TxKind.SINGLE, ZERO_DIGEST, _digest(b"junk"), PayloadTag.GENERIC, junk_key)
        block = form_block([junk_tx], self.chain, self.keypair, 1, flush=True)
        block = dataclasses.replace(block, generator_signature=self.keypair.sign(b"corrupt"))
        engine.trace.emit(engine.now, self.node_id, "corrupt_block_emitted",
                          height=block.height, period=period_index)
        for peer in self.peers:
            engine.send(self.node_id, peer, BlockMessage(block, self.node_id))

    def on_block(self, engine, block: Block) -> None:
        sample_seed = engine.rng(f"validate:{self.node_id}").getrandbits(64)
        verdict = _validate_block(block, self.chain, self.trust, sample_seed)
        generator = self.generator_name(block.generator_pk)
        engine.trace.emit(engine.now, self.node_id, "block_validated",
                          block_id=block.block_id.hex(), height=block.height,
                          generator=generator, ok=verdict.ok,
                          fault=verdict.fault.value if verdict.fault else None,
                          verification_count=verdict.verification_count)
        if not verdict.ok:
            rec = self.trust.record_invalid(block.generator_pk)
            engine.trace.emit(engine.now, self.node_id, "trust_updated",
                              generator=generator, score=rec.trust_score,
                              valid=rec.valid_blocks_seen, invalid=rec.invalid_blocks_seen)
            engine.trace.emit(engine.now, self.node_id, "block_rejected",
                              block_id=block.block_id.hex(), height=block.height,
                              fault=verdict.fault.value)
            return
        append_block(self.chain, block)
        self.blocks_appended += 1
        rec = self.trust.record_valid(block.generator_pk)
        included = {tx.t_id for tx in block.transactions}
        self.pool = [tx for tx in self.pool if tx.t_id not in included]
        self._pool_ids = {tx.t_id for tx in self.pool}
        engine.trace.emit(engine.now, self.node_id, "block_appended",
                          block_id=block.block_id.hex(), height=block.height,
                          n_tx=len(block.transactions), generator=generator)
        engine.trace.emit(engine.now, self.node_id, "trust_updated",
                          generator=generator, score=rec.trust_score,
                          valid=rec.valid_blocks_seen, invalid=rec.invalid_blocks_seen)
        for tx in block.transactions:
            self._unpark(engine, tx.t_id)

    # -- reporting ----------------------------------------------------------------

    def emit_summary(self, engine) -> None:
        chain_text = "\n".join(self.chain.dump_lines())
        sw_finals = sum(1 for tx in self.chain.all_transactions()
                        if tx.payload_tag is PayloadTag.SW_UPDATE and tx.fully_signed)
        engine.trace.emit(engine.now, self.node_id, "manager_summary",
                          pool_depth=len(self.pool), waiting=len(self.waiting),
                          blocks=self.chain.height, delivered=self.delivered_count,
                          drops=dict(self.drops), sw_finals=sw_finals,
                          chain_digest=_digest(chain_text.encode()).hex())
