"""Smart-vehicle actor: local record storage with periodic on-chain hash
anchoring, backup transfer, delay-driven soft handover between cluster heads,
update verification and installation, and insurance claim filing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .crypto import (
    ZERO_DIGEST,
    Digest,
    KeyPair,
    KeyRing,
    PublicKey,
    canonical_join,
    digest,
    generate_keypair,
)
from .ledger import (
    Chain,
    PayloadTag,
    Transaction,
    TxKind,
    build_transaction,
    check_integrity,
    countersign,
)
from .messages import BaseActor, DeliverTx, Timer, TxMessage, UpdateNotice
from .swformat import parse_sw_binary

RECORD_CATEGORIES = ("location", "braking", "speed", "maintenance", "other")


@dataclass(frozen=True)
class StorageRecord:
    """One privacy-sensitive record kept in vehicle storage."""

    timestamp: float
    category: str
    payload: bytes

    def wire_bytes(self) -> bytes:
        return canonical_join(
            repr(self.timestamp).encode(), self.category.encode(), self.payload)

    def to_json_obj(self) -> list:
        return [self.timestamp, self.category, self.payload.hex()]

    @staticmethod
    def from_json_obj(obj) -> "StorageRecord":
        return StorageRecord(float(obj[0]), str(obj[1]), bytes.fromhex(obj[2]))


def storage_digest(records) -> Digest:
    """Canonical digest over an ordered record store."""
    return digest(canonical_join(*[r.wire_bytes() for r in records]))


def prove_storage_integrity(records, chain: Chain, allowed_pks) -> bool:
    """True iff an anchor stored in the chain carries the digest of exactly
    this record sequence under one of the given keys."""
    want = storage_digest(records)
    allowed = set(allowed_pks)
    for tx in chain.all_transactions():
        if (tx.payload_tag in (PayloadTag.STORAGE_ANCHOR, PayloadTag.BACKUP_ANCHOR)
                and tx.payload_digest == want and tx.pk_1 in allowed):
            return True
    return False


class Vehicle(BaseActor):
    """A cluster member with a wireless interface to its current manager."""

    def __init__(
        self,
        node_id: str,
        keys: KeyRing,
        obm_id: str,
        *,
        oem_pk: Optional[PublicKey] = None,
        cloud_id: str = "cloud",
        cloud_account: Optional[tuple[str, KeyPair]] = None,
        insurance_account: Optional[tuple[str, KeyPair]] = None,
        anchor_interval: float = 0.0,
        backup_interval: float = 0.0,
        record_interval: float = 0.0,
        record_categories: tuple = ("location", "speed"),
        upload_categories: tuple = (),
        probe_interval: float = 0.0,
        handover_threshold: float = 1e9,
        handover_improvement: float = 0.8,
        probe_samples: int = 3,
        candidate_obms: tuple = (),
    ):
        super().__init__(node_id)
        self.keys = keys
        self.obm_id = obm_id
        self.oem_pk = oem_pk
        self.cloud_id = cloud_id
        self.cloud_account = cloud_account
        self.insurance_account = insurance_account

        self.in_vehicle_storage: list[StorageRecord] = []
        self.backup_store: list[StorageRecord] = []
        self.installed_sw: dict[str, tuple[str, str]] = {}  # ecu -> (version, digest hex)

        self.anchor_interval = anchor_interval
        self.backup_interval = backup_interval
        self.record_interval = record_interval
        self.record_categories = tuple(record_categories)
        self.upload_categories = tuple(upload_categories)
        self.probe_interval = probe_interval
        self.handover_threshold = handover_threshold
        self.handover_improvement = handover_improvement
        self.probe_samples = probe_samples
        self.candidate_obms = tuple(candidate_obms)

        # access set: (requester pk, own pk) pairs this vehicle keeps uploaded
        # at its current manager, re-uploaded on handover
        self.access_set: list[tuple[PublicKey, PublicKey]] = []

        self.last_anchor_tid: dict[PublicKey, Digest] = {}  # per signing key
        self.anchored_digests: dict[str, str] = {}  # anchor t_id hex -> store digest hex
        self.last_anchor_tx: Optional[Transaction] = None
        self.received_txs: list[Transaction] = []
        self.update_outcomes: list[tuple[str, str]] = []  # (t_id hex, outcome)
        self.claim_results: list[str] = []
        self.upload_errors: list[str] = []
        self.handover_count = 0
        self.stop_at = float("inf")  # periodic timers stop after this time
        self._handover_in_flight = False
        self._record_seq = 0
        self._handled_updates: set[str] = set()

    # -- timers ----------------------------------------------------------------

    def start(self, engine) -> None:
        for kind, interval in (("record", self.record_interval),
                               ("anchor", self.anchor_interval),
                               ("backup", self.backup_interval),
                               ("probe", self.probe_interval)):
            if interval > 0:
                engine.schedule(interval, self.node_id, Timer(kind, {}))

    def _again(self, engine, kind: str, interval: float) -> None:
        """Reschedule a periodic timer unless it would land past stop_at."""
        if engine.now + interval <= self.stop_at:
            engine.schedule(interval, self.node_id, Timer(kind, {}))

    def on_timer(self, engine, timer: Timer) -> None:
        if timer.kind == "record":
            self.append_records(engine)
            self._again(engine, "record", self.record_interval)
        elif timer.kind == "anchor":
            self.anchor_storage(engine)
            self._again(engine, "anchor", self.anchor_interval)
        elif timer.kind == "backup":
            self.transfer_to_backup(engine)
            self._again(engine, "backup", self.backup_interval)
        elif timer.kind == "probe":
            self.evaluate_handover(engine)
            self._again(engine, "probe", self.probe_interval)
        elif timer.kind == "accident":
            self.trigger_accident(engine, **timer.data)
        elif timer.kind == "claim":
            self._send_claim(engine, **timer.data)
        else:
            super().on_timer(engine, timer)

    # -- provisioning -----------------------------------------------------------

    def on_request(self, engine, request) -> None:
        if request.kind == "provision_insurance":
            account_id = request.data["account"]
            account_key = generate_keypair(request.data["secret_seed"])
            insurer_pk = PublicKey.from_hex(request.data["insurer_pk"])
            self.insurance_account = (account_id, account_key)
            pair = (insurer_pk, account_key.public)
            if pair not in self.access_set:
                self.access_set.append(pair)
            engine.trace.emit(engine.now, self.node_id, "insurance_provisioned",
                              account=account_id)
            self.send_request(engine, self.obm_id, "upload_keys", {
                "entries": [(insurer_pk.hex(), account_key.public.hex())],
            }, lambda eng, resp: None)
            self.reply(engine, request, {"ok": True})
        else:
            super().on_request(engine, request)

    # -- storage and anchoring ----------------------------------------------------

    def append_records(self, engine) -> None:
        for category in self.record_categories:
            payload = f"{category}@{engine.now:.3f}#{self._record_seq}".encode()
            record = StorageRecord(engine.now, category, payload)
            self.in_vehicle_storage.append(record)
            self._record_seq += 1
            if category in self.upload_categories and self.insurance_account:
                self._upload_record(engine, record)

    def _anchor_key(self) -> KeyPair:
        """Anchors that an insurer must later attribute use the stable account
        key; otherwise the (possibly rotating) interaction key."""
        if self.insurance_account is not None:
            return self.insurance_account[1]
        return self.keys.interaction_key()

    def submit(self, engine, tx: Transaction) -> None:
        engine.send(self.node_id, self.obm_id, TxMessage(tx, origin_member=self.node_id))

    def anchor_storage(self, engine) -> Transaction:
        key = self._anchor_key()
        store_digest = storage_digest(self.in_vehicle_storage)
        tx = build_transaction(
            TxKind.SINGLE,
            self.last_anchor_tid.get(key.public, ZERO_DIGEST),
            store_digest,
            PayloadTag.STORAGE_ANCHOR,
            key,
        )
        self.last_anchor_tid[key.public] = tx.t_id
        self.anchored_digests[tx.t_id.hex()] = store_digest.hex()
        self.last_anchor_tx = tx
        engine.trace.emit(engine.now, self.node_id, "anchor",
                          t_id=tx.t_id.hex(), n_records=len(self.in_vehicle_storage),
                          store_digest=store_digest.hex())
        self.submit(engine, tx)
        return tx

    def transfer_to_backup(self, engine) -> Optional[Transaction]:
        if not self.in_vehicle_storage:
            return None
        moved = len(self.in_vehicle_storage)
        self.backup_store.extend(self.in_vehicle_storage)
        self.in_vehicle_storage.clear()
        key = self._anchor_key()
        backup_digest = storage_digest(self.backup_store)
        tx = build_transaction(
            TxKind.SINGLE,
            self.last_anchor_tid.get(key.public, ZERO_DIGEST),
            backup_digest,
            PayloadTag.BACKUP_ANCHOR,
            key,
        )
        self.last_anchor_tid[key.public] = tx.t_id
        self.anchored_digests[tx.t_id.hex()] = backup_digest.hex()
        engine.trace.emit(engine.now, self.node_id, "backup",
                          t_id=tx.t_id.hex(), moved=moved,
                          backup_total=len(self.backup_store))
        self.submit(engine, tx)
        return tx

    # -- cloud access (challenge-response each time; no session caching) -----------

    def _upload_record(self, engine, record: StorageRecord) -> None:
        account_id = self.insurance_account[0]
        object_id = f"{account_id}/records/{self._record_seq}"

        def done(eng, resp):
            if "error" in resp:
                self.upload_errors.append(resp["error"])
                eng.trace.emit(eng.now, self.node_id, "upload_rejected",
                               object=object_id, error=resp["error"])
            else:
                eng.trace.emit(eng.now, self.node_id, "record_uploaded",
                               object=object_id, category=record.category)

        self.cloud_call(engine, self.cloud_id, self.insurance_account, "cloud_put",
                        {"object": object_id, "data": record.wire_bytes().hex()},
                        done)

    # -- software update client -----------------------------------------------------

    def on_payload(self, engine, payload) -> None:
        if isinstance(payload, UpdateNotice):
            self.handle_update_notification(engine, payload.tx)
        elif isinstance(payload, DeliverTx):
            self._on_delivered(engine, payload.tx)
        else:
            super().on_payload(engine, payload)

    def _reject_update(self, engine, tx: Transaction, reason: str) -> None:
        self.update_outcomes.append((tx.t_id.hex(), reason))
        engine.trace.emit(engine.now, self.node_id, "update_rejected",
                          t_id=tx.t_id.hex(), reason=reason)

    def handle_update_notification(self, engine, tx: Transaction) -> None:
        tid = tx.t_id.hex()
        if tid in self._handled_updates:
            return
        self._handled_updates.add(tid)
        engine.trace.emit(engine.now, self.node_id, "update_received", t_id=tid)
        verdict = check_integrity(tx)
        if not (verdict.ok and tx.fully_signed and tx.payload_tag is PayloadTag.SW_UPDATE):
            self._reject_update(engine, tx, "invalid")
            return
        if self.oem_pk is None or tx.pk_2 != self.oem_pk:
            self._reject_update(engine, tx, "NotFromMyOem")
            return
        if self.cloud_account is None:
            self._reject_update(engine, tx, "CloudAuthFailed")
            return

        def on_download(eng, resp):
            error = resp.get("error")
            if error == "NotFound":
                self._reject_update(eng, tx, "DownloadMissing")
                return
            if error is not None:
                self._reject_update(eng, tx, "CloudAuthFailed")
                return
            blob = bytes.fromhex(resp["data"])
            if digest(blob) != tx.payload_digest:
                self._reject_update(eng, tx, "HashMismatch")
                return
            try:
                ecu, version, _body = parse_sw_binary(blob)
            except ValueError:
                self._reject_update(eng, tx, "invalid")
                return
            self.installed_sw[ecu] = (version, tx.payload_digest.hex())
            self.update_outcomes.append((tid, "installed"))
            eng.trace.emit(eng.now, self.node_id, "update_verified", t_id=tid)
            eng.trace.emit(eng.now, self.node_id, "installed",
                           ecu=ecu, version=version,
                           sw_digest=tx.payload_digest.hex())

        self.cloud_call(engine, self.cloud_id, self.cloud_account, "cloud_get",
                        {"object": f"sw/{tx.payload_digest.hex()}"}, on_download)

    # -- deliveries -------------------------------------------------------------------

    def _my_keypairs(self) -> list[KeyPair]:
        pairs = [self.keys.current, *self.keys.history]
        for account in (self.cloud_account, self.insurance_account):
            if account is not None:
                pairs.append(account[1])
        return pairs

    def _on_delivered(self, engine, tx: Transaction) -> None:
        self.received_txs.append(tx)
        engine.trace.emit(engine.now, self.node_id, "tx_received",
                          t_id=tx.t_id.hex(), pending=not tx.fully_signed)
        if tx.kind is TxKind.MULTI and tx.sig_2 is None:
            for keypair in self._my_keypairs():
                if keypair.public == tx.pk_2:
                    final = countersign(tx, keypair)
                    engine.trace.emit(engine.now, self.node_id, "countersigned",
                                      pending_t_id=tx.t_id.hex(),
                                      t_id=final.t_id.hex())
                    self.submit(engine, final)
                    return

    # -- soft handover ------------------------------------------------------------------

    def evaluate_handover(self, engine) -> None:
        if self._handover_in_flight or not self.candidate_obms:
            return
        delays = {}
        for candidate in self.candidate_obms:
            delays[candidate] = engine.probe_rtt(
                self.node_id, candidate, self.probe_samples)
        engine.trace.emit(engine.now, self.node_id, "probe",
                          delays={k: round(v, 6) for k, v in delays.items()})
        eligible = {c: d for c, d in delays.items() if d <= self.handover_threshold}
        if not eligible:
            engine.trace.emit(engine.now, self.node_id, "handover_skipped",
                              reason="all_above_threshold")
            return
        best = min(eligible, key=lambda c: (eligible[c], c))
        if best == self.obm_id:
            return
        current_delay = delays.get(self.obm_id, float("inf"))
        if eligible[best] > self.handover_improvement * current_delay:
            engine.trace.emit(engine.now, self.node_id, "handover_skipped",
                              reason="hysteresis")
            return
        self._start_handover(engine, best, delays)

    def _start_handover(self, engine, new_obm: str, delays: dict) -> None:
        self._handover_in_flight = True
        old_obm = self.obm_id
        entries = [(req.hex(), mine.hex()) for req, mine in self.access_set]

        def on_joined(eng, resp):
            self.obm_id = new_obm  # connect before break
            self.handover_count += 1
            eng.trace.emit(eng.now, self.node_id, "handover",
                           old=old_obm, new=new_obm,
                           delays={k: round(v, 6) for k, v in delays.items()})
            self.send_request(eng, old_obm, "leave_cluster", {}, on_left)

        def on_left(eng, resp):
            self._handover_in_flight = False

        self.send_request(engine, new_obm, "join_cluster",
                          {"member_kind": "vehicle", "entries": entries}, on_joined)

    # -- insurance claims -----------------------------------------------------------------

    def trigger_accident(self, engine, insurer_id: str, claim_delay: float = 0.0,
                         tamper: bool = False) -> None:
        """Accident handling: snapshot the store, anchor it, then file a claim
        referencing that anchor once it has had time to reach the chain."""
        snapshot = [r.to_json_obj() for r in self.in_vehicle_storage]
        anchor = self.anchor_storage(engine)
        engine.trace.emit(engine.now, self.node_id, "accident",
                          anchor_t_id=anchor.t_id.hex(), n_records=len(snapshot),
                          tamper=tamper)
        engine.schedule(max(claim_delay, 0.0), self.node_id, Timer("claim", {
            "insurer_id": insurer_id,
            "anchor_tid": anchor.t_id.hex(),
            "records": snapshot,
            "tamper": tamper,
        }))

    def _send_claim(self, engine, insurer_id: str, anchor_tid: str,
                    records: list, tamper: bool) -> None:
        claimed = [list(r) for r in records]
        if tamper and claimed:
            altered = bytearray(bytes.fromhex(claimed[0][2]))
            altered[0] ^= 0x01
            claimed[0][2] = bytes(altered).hex()
        account_id = self.insurance_account[0] if self.insurance_account else ""

        def on_verdict(eng, resp):
            self.claim_results.append(resp["verdict"])
            eng.trace.emit(eng.now, self.node_id, "claim_result",
                           anchor_t_id=anchor_tid, verdict=resp["verdict"])

        engine.trace.emit(engine.now, self.node_id, "claim_filed",
                          anchor_t_id=anchor_tid, n_records=len(claimed),
                          tampered=tamper)
        self.send_request(engine, insurer_id, "file_claim", {
            "account": account_id,
            "anchor_tid": anchor_tid,
            "records": claimed,
        }, on_verdict)
