"""Backend service actors: authenticated cloud object store, OEM approval of
published updates, the software provider's publish flow, and the insurer's
account lifecycle and claim verification.
"""
from __future__ import annotations

from typing import Optional

from .crypto import (
    ZERO_DIGEST,
    Certificate,
    Digest,
    KeyPair,
    PublicKey,
    Signature,
    digest,
    generate_keypair,
    verify,
)
from .ledger import (
    PayloadTag,
    Transaction,
    TxKind,
    build_transaction,
    check_integrity,
    countersign,
)
from .messages import AppRequest, BaseActor, DeliverTx, TxMessage
from .swformat import build_sw_binary
from .vehicle import StorageRecord, storage_digest

SW_OBJECT_PREFIX = "sw/"


def sw_object_id(payload_digest: Digest) -> str:
    """Content-addressed cloud object id for an update binary."""
    return SW_OBJECT_PREFIX + payload_digest.hex()


class CloudStore(BaseActor):
    """Key-value object store with per-account ACLs behind challenge-response
    authentication. ACL entries ending in "/" grant the whole prefix."""

    def __init__(self, node_id: str, *, retain_closed_objects: bool = True):
        super().__init__(node_id)
        self.objects: dict[str, bytes] = {}
        self.accounts: dict[str, PublicKey] = {}
        self.acl: dict[str, set[str]] = {}
        self.retain_closed_objects = retain_closed_objects
        self._nonces: dict[str, set[str]] = {}  # account -> outstanding challenges
        self._sessions: dict[str, str] = {}
        self._session_seq = 0

    # -- administration (trusted provisioning channel) --------------------------

    def create_account(self, account_id: str, pk: PublicKey, acl) -> None:
        self.accounts[account_id] = pk
        self.acl[account_id] = set(acl)

    def close_account(self, account_id: str) -> bool:
        existed = account_id in self.accounts
        self.accounts.pop(account_id, None)
        self.acl.pop(account_id, None)
        self._nonces.pop(account_id, None)
        self._sessions = {s: a for s, a in self._sessions.items() if a != account_id}
        if not self.retain_closed_objects:
            prefix = f"{account_id}/"
            self.objects = {k: v for k, v in self.objects.items()
                            if not k.startswith(prefix)}
        return existed

    def _allowed(self, account_id: str, object_id: str) -> bool:
        for entry in self.acl.get(account_id, ()):
            if entry == object_id or (entry.endswith("/") and object_id.startswith(entry)):
                return True
        return False

    # -- request protocol ---------------------------------------------------------

    def on_request(self, engine, request: AppRequest) -> None:
        handler = {
            "cloud_auth": self._auth,
            "cloud_proof": self._proof,
            "cloud_put": self._put,
            "cloud_get": self._get,
            "admin_create_account": self._admin_create,
            "admin_close_account": self._admin_close,
        }.get(request.kind)
        if handler is None:
            super().on_request(engine, request)
            return
        self.reply(engine, request, handler(engine, request.data))

    def _auth(self, engine, data: dict) -> dict:
        account_id = data["account"]
        if account_id not in self.accounts:
            return {"error": "UnknownAccount"}
        nonce = engine.rng(f"cloud:{self.node_id}").getrandbits(256).to_bytes(32, "big")
        self._nonces.setdefault(account_id, set()).add(nonce.hex())
        return {"nonce": nonce.hex()}

    def _proof(self, engine, data: dict) -> dict:
        account_id = data["account"]
        pk = self.accounts.get(account_id)
        if pk is None:
            return {"error": "UnknownAccount"}
        nonce_hex = data.get("nonce", "")
        outstanding = self._nonces.get(account_id, set())
        if nonce_hex not in outstanding:
            return {"error": "BadProof"}
        outstanding.discard(nonce_hex)
        if not verify(bytes.fromhex(nonce_hex),
                      Signature(bytes.fromhex(data["proof"])), pk):
            return {"error": "BadProof"}
        self._session_seq += 1
        session = f"session-{self._session_seq}"
        self._sessions[session] = account_id
        engine.trace.emit(engine.now, self.node_id, "cloud_session",
                          account=account_id, session=session)
        return {"session": session}

    def _session_account(self, data: dict) -> Optional[str]:
        return self._sessions.get(data.get("session", ""))

    def _put(self, engine, data: dict) -> dict:
        account_id = self._session_account(data)
        if account_id is None:
            return {"error": "NoSession"}
        object_id = data["object"]
        if not self._allowed(account_id, object_id):
            engine.trace.emit(engine.now, self.node_id, "cloud_denied",
                              account=account_id, object=object_id, op="put")
            return {"error": "AccessDenied"}
        self.objects[object_id] = bytes.fromhex(data["data"])
        engine.trace.emit(engine.now, self.node_id, "cloud_put",
                          account=account_id, object=object_id,
                          size=len(self.objects[object_id]))
        return {"ok": True}

    def _get(self, engine, data: dict) -> dict:
        account_id = self._session_account(data)
        if account_id is None:
            return {"error": "NoSession"}
        object_id = data["object"]
        if not self._allowed(account_id, object_id):
            engine.trace.emit(engine.now, self.node_id, "cloud_denied",
                              account=account_id, object=object_id, op="get")
            return {"error": "AccessDenied"}
        blob = self.objects.get(object_id)
        if blob is None:
            return {"error": "NotFound"}
        return {"data": blob.hex()}

    def _admin_create(self, engine, data: dict) -> dict:
        self.create_account(data["account"], PublicKey.from_hex(data["pk"]),
                            data.get("acl", []))
        engine.trace.emit(engine.now, self.node_id, "account_created",
                          account=data["account"])
        return {"ok": True}

    def _admin_close(self, engine, data: dict) -> dict:
        existed = self.close_account(data["account"])
        engine.trace.emit(engine.now, self.node_id, "account_closed",
                          account=data["account"], existed=existed)
        return {"ok": True, "existed": existed}


class SwProvider(BaseActor):
    """Software provider: stores a new binary in the cloud and submits the
    half-signed update transaction addressed to the OEM."""

    def __init__(self, node_id: str, keypair: KeyPair, obm_id: str, *,
                 cloud_id: str, cloud_account: tuple[str, KeyPair],
                 oem_pk: PublicKey, certificate: Optional[Certificate] = None):
        super().__init__(node_id)
        self.keypair = keypair
        self.obm_id = obm_id
        self.cloud_id = cloud_id
        self.cloud_account = cloud_account
        self.oem_pk = oem_pk
        self.certificate = certificate
        self.last_final_tid: Digest = ZERO_DIGEST
        self.published: list[tuple[str, str, str]] = []  # (version, object id, pending tid)

    def publish_update(self, engine, ecu: str, version: str,
                       body: Optional[bytes] = None) -> None:
        if body is None:
            rng = engine.rng(f"binary:{self.node_id}:{version}")
            body = rng.getrandbits(8 * 256).to_bytes(256, "big")
        blob = build_sw_binary(ecu, version, body)
        blob_digest = digest(blob)
        object_id = sw_object_id(blob_digest)

        def on_stored(eng, resp):
            if "error" in resp:
                eng.trace.emit(eng.now, self.node_id, "publish_failed",
                               version=version, error=resp["error"])
                return
            pending = build_transaction(
                TxKind.MULTI, self.last_final_tid, blob_digest,
                PayloadTag.SW_UPDATE, self.keypair, recipient_pk=self.oem_pk)
            self.published.append((version, object_id, pending.t_id.hex()))
            eng.trace.emit(eng.now, self.node_id, "published",
                           version=version, object=object_id,
                           t_id=pending.t_id.hex())
            eng.send(self.node_id, self.obm_id,
                     TxMessage(pending, origin_member=self.node_id))

        self.cloud_call(engine, self.cloud_id, self.cloud_account, "cloud_put",
                        {"object": object_id, "data": blob.hex()}, on_stored)

    def on_payload(self, engine, payload) -> None:
        if isinstance(payload, DeliverTx):
            tx = payload.tx
            if tx.fully_signed and tx.pk_1 == self.keypair.public:
                # countersign feedback: the recipient recomputed the final id
                self.last_final_tid = tx.t_id
                engine.trace.emit(engine.now, self.node_id, "final_observed",
                                  t_id=tx.t_id.hex())
        else:
            super().on_payload(engine, payload)


class Oem(BaseActor):
    """Vehicle manufacturer: re-verifies published binaries and countersigns
    the provider's pending update transactions."""

    def __init__(self, node_id: str, keypair: KeyPair, obm_id: str, *,
                 cloud_id: str, cloud_account: tuple[str, KeyPair],
                 certificate: Optional[Certificate] = None):
        super().__init__(node_id)
        self.keypair = keypair
        self.obm_id = obm_id
        self.cloud_id = cloud_id
        self.cloud_account = cloud_account
        self.certificate = certificate
        self.approvals: list[tuple[str, str]] = []  # (pending tid, final tid)
        self.rejections: list[tuple[str, str]] = []  # (pending tid, reason)
        self.observed_finals: list[str] = []

    def on_payload(self, engine, payload) -> None:
        if isinstance(payload, DeliverTx):
            tx = payload.tx
            if tx.fully_signed:
                if tx.pk_2 == self.keypair.public or tx.pk_1 == self.keypair.public:
                    self.observed_finals.append(tx.t_id.hex())
                return
            self.approve(engine, tx)
        else:
            super().on_payload(engine, payload)

    def _reject(self, engine, tx: Transaction, reason: str) -> None:
        self.rejections.append((tx.t_id.hex(), reason))
        engine.trace.emit(engine.now, self.node_id, "approval_rejected",
                          t_id=tx.t_id.hex(), reason=reason)

    def approve(self, engine, pending: Transaction) -> None:
        """Verify a half-signed update end-to-end, then countersign it."""
        if pending.kind is not TxKind.MULTI or pending.pk_2 != self.keypair.public:
            self._reject(engine, pending, "NotAddressedToMe")
            return
        if pending.sig_2 is not None:
            return
        verdict = check_integrity(pending)
        if not verdict.ok:
            self._reject(engine, pending, "BadProviderSignature")
            return
        if pending.payload_tag is not PayloadTag.SW_UPDATE:
            self._reject(engine, pending, "NotAddressedToMe")
            return

        def on_download(eng, resp):
            if "error" in resp:
                self._reject(eng, pending, "DigestMismatch")
                return
            blob = bytes.fromhex(resp["data"])
            if digest(blob) != pending.payload_digest:
                self._reject(eng, pending, "DigestMismatch")
                return
            final = countersign(pending, self.keypair)
            self.approvals.append((pending.t_id.hex(), final.t_id.hex()))
            eng.trace.emit(eng.now, self.node_id, "approved",
                           pending_t_id=pending.t_id.hex(),
                           t_id=final.t_id.hex())
            eng.send(self.node_id, self.obm_id,
                     TxMessage(final, origin_member=self.node_id))

        self.cloud_call(engine, self.cloud_id, self.cloud_account, "cloud_get",
                        {"object": sw_object_id(pending.payload_digest)},
                        on_download)


class Insurer(BaseActor):
    """Insurance company: opens and closes vehicle cloud accounts, keeps the
    account-to-owner registry and key database, and verifies claims against
    anchors stored in the chain."""

    def __init__(self, node_id: str, keypair: KeyPair, obm_id: str, *,
                 cloud_id: str, certificate: Optional[Certificate] = None):
        super().__init__(node_id)
        self.keypair = keypair
        self.obm_id = obm_id
        self.cloud_id = cloud_id
        self.certificate = certificate
        self.registry: dict[str, str] = {}  # account id -> owner identity
        self.pk_db: dict[str, PublicKey] = {}  # account id -> account pk
        self.verdicts: list[tuple[str, str]] = []  # (account, verdict)
        self._account_seq = 0

    def open_account(self, engine, vehicle_id: str, owner_identity: str) -> str:
        self._account_seq += 1
        account_id = f"{self.node_id}-acct-{self._account_seq}"
        account_key = generate_keypair(f"{self.node_id}:account:{account_id}")
        self.registry[account_id] = owner_identity
        self.pk_db[account_id] = account_key.public

        def on_created(eng, resp):
            eng.trace.emit(eng.now, self.node_id, "account_opened",
                           account=account_id, vehicle=vehicle_id)
            self.send_request(eng, vehicle_id, "provision_insurance", {
                "account": account_id,
                "secret_seed": f"{self.node_id}:account:{account_id}",
                "insurer_pk": self.keypair.public.hex(),
            }, lambda e, r: None)

        self.send_request(engine, self.cloud_id, "admin_create_account", {
            "account": account_id,
            "pk": account_key.public.hex(),
            "acl": [f"{account_id}/"],
        }, on_created)
        return account_id

    def close_account(self, engine, account_id: str) -> None:
        def on_closed(eng, resp):
            eng.trace.emit(eng.now, self.node_id, "account_closure",
                           account=account_id, existed=resp.get("existed"))

        self.send_request(engine, self.cloud_id, "admin_close_account",
                          {"account": account_id}, on_closed)

    def on_request(self, engine, request: AppRequest) -> None:
        if request.kind != "file_claim":
            super().on_request(engine, request)
            return
        data = request.data
        account_id = data["account"]
        records = [StorageRecord.from_json_obj(r) for r in data["records"]]

        def on_anchor(eng, resp):
            verdict = self._verdict(account_id, records, resp["tx"])
            self.verdicts.append((account_id, verdict))
            eng.trace.emit(eng.now, self.node_id, "claim_verified",
                           account=account_id, anchor_t_id=data["anchor_tid"],
                           verdict=verdict)
            self.reply(eng, request, {"verdict": verdict})

        self.send_request(engine, self.obm_id, "chain_lookup",
                          {"t_id": data["anchor_tid"]}, on_anchor)

    def _verdict(self, account_id: str, records, tx_obj) -> str:
        if tx_obj is None:
            return "AnchorNotFound"
        anchor = Transaction.from_json_obj(tx_obj)
        registered_pk = self.pk_db.get(account_id)
        if registered_pk is None or anchor.pk_1 != registered_pk:
            return "KeyNotRegistered"
        if storage_digest(records) != anchor.payload_digest:
            return "DigestMismatch"
        return "accepted"
