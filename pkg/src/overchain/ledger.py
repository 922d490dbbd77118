"""Core ledger: transactions, blocks, chains, trust scoring, throughput adjustment.

Transactions identify their signer(s) by public key only. A single-sig
transaction is complete as built; a multisig transaction starts half-signed
("pending") and becomes complete when the addressed party countersigns, which
recomputes its identifier. Each public key's transactions form a hash-linked
list through ``p_t_id`` starting from the all-zero digest.

Blocks are generated on a fixed round-robin turn schedule (no proof-of-work)
and receivers verify only a trust-dependent fraction of block contents.
"""
from __future__ import annotations

import dataclasses
import json
import math
import random
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import AbstractSet, Iterable, Optional, Sequence

from .crypto import (
    ZERO_DIGEST,
    Digest,
    KeyPair,
    PublicKey,
    Signature,
    canonical_join,
    digest,
    verify,
)


class TxKind(str, Enum):
    SINGLE = "single"
    MULTI = "multi"


class PayloadTag(str, Enum):
    STORAGE_ANCHOR = "storage_anchor"
    BACKUP_ANCHOR = "backup_anchor"
    SW_UPDATE = "sw_update"
    INSURANCE_DATA = "insurance_data"
    GENERIC = "generic"


# ---------------------------------------------------------------------------
# transactions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    """One ledger entry. ``t_id`` is the digest of every other field, so any
    byte of the stored form is tamper-evident. Payload bytes live off-chain;
    only their digest is committed."""

    t_id: Digest
    p_t_id: Digest
    kind: TxKind
    pk_1: PublicKey
    sig_1: Signature
    pk_2: Optional[PublicKey]
    sig_2: Optional[Signature]
    payload_digest: Digest
    payload_tag: PayloadTag

    def signing_body(self) -> bytes:
        """Bytes covered by sig_1 and (for multisig) sig_2."""
        fields = [self.p_t_id.data, self.payload_digest.data, self.pk_1.data]
        if self.pk_2 is not None:
            fields.append(self.pk_2.data)
        return canonical_join(*fields)

    def body_bytes(self) -> bytes:
        """Canonical serialization of every field except t_id."""
        return canonical_join(
            self.p_t_id.data,
            self.kind.value.encode(),
            self.pk_1.data,
            self.sig_1.data,
            self.pk_2.data if self.pk_2 else b"",
            self.sig_2.data if self.sig_2 else b"",
            self.payload_digest.data,
            self.payload_tag.value.encode(),
        )

    def compute_t_id(self) -> Digest:
        return digest(self.body_bytes())

    def wire_bytes(self) -> bytes:
        return canonical_join(self.t_id.data) + self.body_bytes()

    @property
    def fully_signed(self) -> bool:
        return self.kind is TxKind.SINGLE or self.sig_2 is not None

    def to_json_obj(self) -> dict:
        return {
            "t_id": self.t_id.hex(),
            "p_t_id": self.p_t_id.hex(),
            "kind": self.kind.value,
            "pk_1": self.pk_1.hex(),
            "sig_1": self.sig_1.hex(),
            "pk_2": self.pk_2.hex() if self.pk_2 else None,
            "sig_2": self.sig_2.hex() if self.sig_2 else None,
            "payload_digest": self.payload_digest.hex(),
            "payload_tag": self.payload_tag.value,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Transaction":
        return cls(
            t_id=Digest.from_hex(obj["t_id"]),
            p_t_id=Digest.from_hex(obj["p_t_id"]),
            kind=TxKind(obj["kind"]),
            pk_1=PublicKey.from_hex(obj["pk_1"]),
            sig_1=Signature.from_hex(obj["sig_1"]),
            pk_2=PublicKey.from_hex(obj["pk_2"]) if obj.get("pk_2") else None,
            sig_2=Signature.from_hex(obj["sig_2"]) if obj.get("sig_2") else None,
            payload_digest=Digest.from_hex(obj["payload_digest"]),
            payload_tag=PayloadTag(obj["payload_tag"]),
        )


def build_transaction(
    kind: TxKind,
    p_t_id: Digest,
    payload_digest: Digest,
    payload_tag: PayloadTag,
    generator: KeyPair,
    recipient_pk: Optional[PublicKey] = None,
) -> Transaction:
    """Build and sign a transaction as its generator (sig_1 holder)."""
    if kind is TxKind.MULTI and recipient_pk is None:
        raise ValueError("multisig transaction needs a recipient public key")
    if kind is TxKind.SINGLE and recipient_pk is not None:
        raise ValueError("single-sig transaction cannot carry a recipient key")
    draft = Transaction(
        t_id=ZERO_DIGEST,
        p_t_id=p_t_id,
        kind=kind,
        pk_1=generator.public,
        sig_1=Signature(b"\x00" * 64),
        pk_2=recipient_pk,
        sig_2=None,
        payload_digest=payload_digest,
        payload_tag=payload_tag,
    )
    signed = dataclasses.replace(draft, sig_1=generator.sign(draft.signing_body()))
    return dataclasses.replace(signed, t_id=signed.compute_t_id())


def countersign(tx: Transaction, recipient: KeyPair) -> Transaction:
    """Complete a pending multisig as the addressed party. Recomputes t_id."""
    if tx.kind is not TxKind.MULTI:
        raise ValueError("only multisig transactions can be countersigned")
    if tx.sig_2 is not None:
        raise ValueError("transaction is already fully signed")
    if tx.pk_2 != recipient.public:
        raise ValueError("countersigner key does not match the addressed pk_2")
    completed = dataclasses.replace(tx, sig_2=recipient.sign(tx.signing_body()))
    return dataclasses.replace(completed, t_id=completed.compute_t_id())


class TxFault(str, Enum):
    MALFORMED = "malformed"
    BAD_SIGNATURE = "bad_signature"
    MISSING_PREDECESSOR = "missing_predecessor"


@dataclass(frozen=True)
class TxVerdict:
    ok: bool
    fault: Optional[TxFault] = None
    detail: str = ""


def check_integrity(tx: Transaction) -> TxVerdict:
    """Structural and signature checks that need no chain context."""
    if tx.kind is TxKind.SINGLE and (tx.pk_2 is not None or tx.sig_2 is not None):
        return TxVerdict(False, TxFault.MALFORMED, "single-sig with countersign fields")
    if tx.kind is TxKind.MULTI and tx.pk_2 is None:
        return TxVerdict(False, TxFault.MALFORMED, "multisig without recipient pk")
    if tx.sig_2 is not None and tx.pk_2 is None:
        return TxVerdict(False, TxFault.MALFORMED, "countersignature without pk_2")
    if tx.t_id != tx.compute_t_id():
        return TxVerdict(False, TxFault.MALFORMED, "t_id does not match contents")
    body = tx.signing_body()
    if not verify(body, tx.sig_1, tx.pk_1):
        return TxVerdict(False, TxFault.BAD_SIGNATURE, "sig_1 invalid")
    if tx.sig_2 is not None and not verify(body, tx.sig_2, tx.pk_2):
        return TxVerdict(False, TxFault.BAD_SIGNATURE, "sig_2 invalid")
    return TxVerdict(True)


def validate_transaction(
    tx: Transaction,
    chain: "Chain",
    known: AbstractSet[Digest] = frozenset(),
) -> TxVerdict:
    """Full validation against a chain. ``known`` extends the predecessor
    lookup with identifiers visible outside the chain (e.g. pooled entries)."""
    verdict = check_integrity(tx)
    if not verdict.ok:
        return verdict
    if tx.p_t_id != ZERO_DIGEST and tx.p_t_id not in chain.tx_index and tx.p_t_id not in known:
        return TxVerdict(False, TxFault.MISSING_PREDECESSOR, "p_t_id unknown")
    return TxVerdict(True)


# ---------------------------------------------------------------------------
# blocks and chains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    block_id: Digest
    prev_block_hash: Digest
    generator_pk: PublicKey
    height: int
    transactions: tuple
    generator_signature: Signature

    def signing_body(self) -> bytes:
        fields = [
            self.prev_block_hash.data,
            self.generator_pk.data,
            struct.pack(">Q", self.height),
        ]
        fields.extend(tx.wire_bytes() for tx in self.transactions)
        return canonical_join(*fields)

    def compute_block_id(self) -> Digest:
        return digest(self.signing_body())

    def to_json_obj(self) -> dict:
        return {
            "height": self.height,
            "block_id": self.block_id.hex(),
            "prev_block_hash": self.prev_block_hash.hex(),
            "generator_pk": self.generator_pk.hex(),
            "generator_signature": self.generator_signature.hex(),
            "transactions": [tx.to_json_obj() for tx in self.transactions],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Block":
        return cls(
            block_id=Digest.from_hex(obj["block_id"]),
            prev_block_hash=Digest.from_hex(obj["prev_block_hash"]),
            generator_pk=PublicKey.from_hex(obj["generator_pk"]),
            height=obj["height"],
            transactions=tuple(Transaction.from_json_obj(t) for t in obj["transactions"]),
            generator_signature=Signature.from_hex(obj["generator_signature"]),
        )


class ChainError(Exception):
    pass


class Chain:
    """An append-only block sequence plus a transaction-id index."""

    def __init__(self) -> None:
        self.blocks: list[Block] = []
        self.tx_index: dict[Digest, tuple[int, int]] = {}

    @property
    def head_hash(self) -> Digest:
        return self.blocks[-1].block_id if self.blocks else ZERO_DIGEST

    @property
    def height(self) -> int:
        return len(self.blocks)

    def get_tx(self, t_id: Digest) -> Optional[Transaction]:
        pos = self.tx_index.get(t_id)
        if pos is None:
            return None
        h, i = pos
        return self.blocks[h].transactions[i]

    def all_transactions(self) -> Iterable[Transaction]:
        for block in self.blocks:
            yield from block.transactions

    def dump_lines(self) -> list[str]:
        """One structured text line per block, suitable for golden-file diffs."""
        return [json.dumps(b.to_json_obj(), separators=(",", ":")) for b in self.blocks]

    @classmethod
    def from_dump_lines(cls, lines: Sequence[str]) -> "Chain":
        chain = cls()
        for line in lines:
            block = Block.from_json_obj(json.loads(line))
            chain._append_unchecked(block)
        return chain

    def _append_unchecked(self, block: Block) -> None:
        self.blocks.append(block)
        for i, tx in enumerate(block.transactions):
            self.tx_index[tx.t_id] = (block.height, i)


def _dependency_order(
    pool: Sequence[Transaction],
    chain: Chain,
    limit: int,
) -> list[Transaction]:
    """Select up to ``limit`` pool entries oldest-first, taking an entry only
    once its predecessor is in the chain or already selected."""
    chosen: list[Transaction] = []
    chosen_ids: set[Digest] = set()
    changed = True
    while changed and len(chosen) < limit:
        changed = False
        for tx in pool:
            if len(chosen) >= limit:
                break
            if tx.t_id in chosen_ids:
                continue
            p = tx.p_t_id
            if p == ZERO_DIGEST or p in chain.tx_index or p in chosen_ids:
                chosen.append(tx)
                chosen_ids.add(tx.t_id)
                changed = True
    return chosen


def form_block(
    pool: list,
    chain: Chain,
    generator: KeyPair,
    block_size: int,
    *,
    flush: bool = False,
) -> Optional[Block]:
    """Take oldest-first pooled transactions into a new signed block.

    A scheduled turn requires a full batch of ``block_size`` ready entries
    and returns None otherwise; with ``flush=True`` (end-of-run drain) a
    shorter block is allowed. Selected entries are removed from ``pool``.
    """
    chosen = _dependency_order(pool, chain, block_size)
    if not flush and len(chosen) < block_size:
        return None
    if not chosen:
        return None
    chosen_ids = {tx.t_id for tx in chosen}
    pool[:] = [tx for tx in pool if tx.t_id not in chosen_ids]
    draft = Block(
        block_id=ZERO_DIGEST,
        prev_block_hash=chain.head_hash,
        generator_pk=generator.public,
        height=len(chain.blocks),
        transactions=tuple(chosen),
        generator_signature=Signature(b"\x00" * 64),
    )
    body = draft.signing_body()
    return dataclasses.replace(
        draft, block_id=digest(body), generator_signature=generator.sign(body)
    )


def schedule_block_turn(period_index: int, manager_ids: Sequence[str]) -> str:
    """Round-robin turn: exactly one manager may append per period."""
    if not manager_ids:
        raise ValueError("no managers to schedule")
    return manager_ids[period_index % len(manager_ids)]


# ---------------------------------------------------------------------------
# trust-weighted block validation
# ---------------------------------------------------------------------------

class BlockFault(str, Enum):
    BROKEN_LINKAGE = "broken_linkage"
    BAD_GENERATOR_SIG = "bad_generator_sig"
    BAD_TRANSACTION = "bad_transaction"


@dataclass(frozen=True)
class BlockVerdict:
    ok: bool
    fault: Optional[BlockFault] = None
    bad_index: Optional[int] = None
    verification_count: int = 0


@dataclass
class TrustRecord:
    valid_blocks_seen: int = 0
    invalid_blocks_seen: int = 0
    trust_score: float = 0.0


class TrustTable:
    """Per-generator trust. Trust ramps up with observed valid blocks and is
    zeroed by any invalid one; the verified fraction of future blocks from a
    generator is max(min_check_fraction, 1 - trust)."""

    def __init__(self, min_check_fraction: float = 0.1, trust_ramp: int = 5):
        self.min_check_fraction = min_check_fraction
        self.trust_ramp = trust_ramp
        self.records: dict[PublicKey, TrustRecord] = {}

    def records_for(self, generator_pk: PublicKey) -> TrustRecord:
        rec = self.records.get(generator_pk)
        if rec is None:
            rec = TrustRecord()
            self.records[generator_pk] = rec
        return rec

    def score(self, generator_pk: PublicKey) -> float:
        rec = self.records.get(generator_pk)
        return rec.trust_score if rec else 0.0

    def record_valid(self, generator_pk: PublicKey) -> TrustRecord:
        rec = self.records_for(generator_pk)
        rec.valid_blocks_seen += 1
        rec.trust_score = min(
            1.0 - self.min_check_fraction,
            rec.valid_blocks_seen / (rec.valid_blocks_seen + self.trust_ramp),
        )
        return rec

    def record_invalid(self, generator_pk: PublicKey) -> TrustRecord:
        rec = self.records_for(generator_pk)
        rec.invalid_blocks_seen += 1
        rec.trust_score = 0.0
        return rec


def checks_for_trust(trust_score: float, block_len: int, min_check_fraction: float) -> int:
    """How many of a block's transactions a receiver verifies. Rounds up so at
    least one transaction is always checked."""
    fraction = max(min_check_fraction, 1.0 - trust_score)
    return min(block_len, math.ceil(fraction * block_len))


def validate_block(
    block: Block,
    chain: Chain,
    trust: TrustTable,
    sample_seed: int,
    min_check_fraction: Optional[float] = None,
) -> BlockVerdict:
    """Receiver-side validation against the local chain head.

    Linkage and the generator signature are always checked; transaction
    contents are spot-checked on a seeded uniform sample whose size shrinks as
    the generator's trust grows. ``verification_count`` reports how many
    transactions were actually verified.
    """
    if min_check_fraction is None:
        min_check_fraction = trust.min_check_fraction
    if (
        block.height != len(chain.blocks)
        or block.prev_block_hash != chain.head_hash
        or block.block_id != block.compute_block_id()
        or not block.transactions
    ):
        return BlockVerdict(False, BlockFault.BROKEN_LINKAGE)
    if not verify(block.signing_body(), block.generator_signature, block.generator_pk):
        return BlockVerdict(False, BlockFault.BAD_GENERATOR_SIG)

    n = len(block.transactions)
    k = checks_for_trust(trust.score(block.generator_pk), n, min_check_fraction)
    sample = sorted(random.Random(sample_seed).sample(range(n), k))
    earlier_ids = [set() for _ in range(n)]
    running: set[Digest] = set()
    for i, tx in enumerate(block.transactions):
        earlier_ids[i] = set(running)
        running.add(tx.t_id)

    executed = 0
    for i in sample:
        tx = block.transactions[i]
        executed += 1
        if not tx.fully_signed:
            return BlockVerdict(False, BlockFault.BAD_TRANSACTION, i, executed)
        verdict = validate_transaction(tx, chain, known=earlier_ids[i])
        if not verdict.ok:
            return BlockVerdict(False, BlockFault.BAD_TRANSACTION, i, executed)
    return BlockVerdict(True, verification_count=executed)


def append_block(chain: Chain, block: Block) -> None:
    """Append a block already judged valid; re-checks linkage defensively."""
    if block.height != len(chain.blocks) or block.prev_block_hash != chain.head_hash:
        raise ChainError("stale prev_block_hash or height")
    if block.block_id != block.compute_block_id():
        raise ChainError("block id does not match contents")
    chain._append_unchecked(block)


def verify_chain(chain: Chain) -> bool:
    """Full audit: linkage, identifiers, and every signature must hold."""
    prev = ZERO_DIGEST
    seen: set[Digest] = set()
    for h, block in enumerate(chain.blocks):
        if block.height != h or block.prev_block_hash != prev:
            return False
        if block.block_id != block.compute_block_id():
            return False
        if not verify(block.signing_body(), block.generator_signature, block.generator_pk):
            return False
        for tx in block.transactions:
            if not tx.fully_signed:
                return False
            if not check_integrity(tx).ok:
                return False
            if tx.p_t_id != ZERO_DIGEST and tx.p_t_id not in seen:
                return False
            seen.add(tx.t_id)
        prev = block.block_id
    return True


# ---------------------------------------------------------------------------
# throughput adjustment
# ---------------------------------------------------------------------------

@dataclass
class ThroughputState:
    """Feedback control of the block period against observed transaction rate.

    Utilization is observed_rate * block_period / (block_size * manager_count);
    outside the dead band the period is scaled multiplicatively back toward
    the nearest band edge and clamped to [period_min, period_max].
    """

    block_period: float
    block_size: int
    utilization_low: float = 0.5
    utilization_high: float = 1.0
    period_min: float = 1.0
    period_max: float = 120.0

    def utilization(self, observed_rate: float, manager_count: int) -> float:
        return observed_rate * self.block_period / (self.block_size * manager_count)

    def adjust(self, observed_rate: float, manager_count: int) -> float:
        """Apply one adjustment round; returns the pre-adjustment utilization."""
        u = self.utilization(observed_rate, manager_count)
        if observed_rate <= 0:
            return u
        if u > self.utilization_high:
            self.block_period *= self.utilization_high / u
        elif u < self.utilization_low:
            self.block_period *= self.utilization_low / u
        self.block_period = min(self.period_max, max(self.period_min, self.block_period))
        return u
