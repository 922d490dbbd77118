"""Service actor tests: cloud object store, software provider, manufacturer
countersigning, and insurer account/claim handling — capped by a two-vehicle
update walkthrough asserting every step of the multisig flow end to end.
"""
from __future__ import annotations

import dataclasses

import pytest

from overchain.crypto import (
    ZERO_DIGEST,
    KeyRing,
    digest,
    generate_keypair,
    issue_certificate,
)
from overchain.ledger import (
    PayloadTag,
    TxKind,
    build_transaction,
    check_integrity,
    countersign,
    verify_chain,
)
from overchain.manager import BlockManager
from overchain.messages import BaseActor, TxMessage
from overchain.services import CloudStore, Insurer, Oem, SwProvider, sw_object_id
from overchain.simnet import Engine, LinkModel, Trace
from overchain.swformat import build_sw_binary, parse_sw_binary
from overchain.vehicle import StorageRecord, Vehicle, storage_digest


class Sink(BaseActor):
    def __init__(self, node_id: str):
        super().__init__(node_id)
        self.got = []

    def on_payload(self, engine, payload) -> None:
        self.got.append(payload)


class Caller(BaseActor):
    """Test client that drives the cloud challenge-response protocol."""

    def __init__(self, node_id: str, account):
        super().__init__(node_id)
        self.account = account
        self.responses = []

    def call(self, engine, cloud_id, kind, data):
        self.cloud_call(engine, cloud_id, self.account, kind, data,
                        lambda eng, resp: self.responses.append(resp))


def cloud_world(**cloud_kwargs):
    engine = Engine(seed="svc-test", links=LinkModel(default_delay=1.0), trace=Trace())
    cloud = CloudStore("cloud", **cloud_kwargs)
    engine.add_node(cloud)
    key = generate_keypair("acct-key")
    cloud.create_account("acct", key.public, ["acct/", "shared-note"])
    caller = Caller("client", ("acct", key))
    engine.add_node(caller)
    return engine, cloud, caller


# -- software binary container ---------------------------------------------------


def test_sw_binary_round_trip():
    blob = build_sw_binary("engine-ecu", "3.1.4", b"\x00\x01\x02" * 100)
    assert parse_sw_binary(blob) == ("engine-ecu", "3.1.4", b"\x00\x01\x02" * 100)


def test_sw_binary_empty_body_round_trip():
    assert parse_sw_binary(build_sw_binary("e", "1", b"")) == ("e", "1", b"")


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],          # wrong magic
    lambda b: b[:-3],                   # truncated
    lambda b: b + b"\x00",              # trailing bytes
    lambda b: b[:5],                    # cut inside a length prefix
])
def test_sw_binary_rejects_malformed_input(mangle):
    blob = build_sw_binary("ecu", "1.0", b"payload")
    with pytest.raises(ValueError):
        parse_sw_binary(mangle(blob))


# -- cloud store -------------------------------------------------------------------


def test_cloud_put_get_round_trip():
    engine, cloud, caller = cloud_world()
    caller.call(engine, "cloud", "cloud_put", {"object": "acct/r1", "data": "beef"})
    caller.call(engine, "cloud", "cloud_get", {"object": "acct/r1"})
    engine.run()
    assert caller.responses == [{"ok": True}, {"data": "beef"}]
    assert cloud.objects["acct/r1"] == b"\xbe\xef"


def test_cloud_acl_exact_entry_and_prefix_entry():
    engine, cloud, caller = cloud_world()
    caller.call(engine, "cloud", "cloud_put", {"object": "shared-note", "data": "00"})
    caller.call(engine, "cloud", "cloud_put", {"object": "acct/deep/path", "data": "01"})
    caller.call(engine, "cloud", "cloud_put", {"object": "shared-note/sub", "data": "02"})
    caller.call(engine, "cloud", "cloud_put", {"object": "other/r1", "data": "03"})
    engine.run()
    assert caller.responses == [
        {"ok": True}, {"ok": True},
        {"error": "AccessDenied"}, {"error": "AccessDenied"},
    ]


def test_cloud_get_unknown_object_is_notfound():
    engine, cloud, caller = cloud_world()
    caller.call(engine, "cloud", "cloud_get", {"object": "acct/missing"})
    engine.run()
    assert caller.responses == [{"error": "NotFound"}]


def test_cloud_auth_for_unknown_account_fails():
    engine, cloud, _ = cloud_world()
    ghost = Caller("ghost", ("nobody", generate_keypair("ghost")))
    engine.add_node(ghost)
    ghost.call(engine, "cloud", "cloud_get", {"object": "acct/r1"})
    engine.run()
    assert ghost.responses == [{"error": "UnknownAccount"}]


def test_cloud_rejects_proof_from_wrong_key():
    engine, cloud, _ = cloud_world()
    impostor = Caller("impostor", ("acct", generate_keypair("not-the-account-key")))
    engine.add_node(impostor)
    impostor.call(engine, "cloud", "cloud_get", {"object": "acct/r1"})
    engine.run()
    assert impostor.responses == [{"error": "BadProof"}]


def test_cloud_ops_without_session_are_refused():
    engine, cloud, caller = cloud_world()

    class Raw(BaseActor):
        def __init__(self):
            super().__init__("raw")
            self.resp = None

    raw = Raw()
    engine.add_node(raw)
    raw.send_request(engine, "cloud", "cloud_put",
                     {"object": "acct/r1", "data": "00", "session": "session-99"},
                     lambda e, r: setattr(raw, "resp", r))
    engine.run()
    assert raw.resp == {"error": "NoSession"}


def test_closed_account_fails_auth_and_loses_sessions():
    engine, cloud, caller = cloud_world()
    caller.call(engine, "cloud", "cloud_put", {"object": "acct/r1", "data": "aa"})
    engine.run()
    assert cloud.close_account("acct") is True
    assert cloud.close_account("acct") is False
    assert cloud._sessions == {}
    caller.call(engine, "cloud", "cloud_get", {"object": "acct/r1"})
    engine.run()
    assert caller.responses[-1] == {"error": "UnknownAccount"}
    # default policy retains stored objects after closure
    assert "acct/r1" in cloud.objects


def test_closing_account_can_purge_its_objects():
    engine, cloud, caller = cloud_world(retain_closed_objects=False)
    caller.call(engine, "cloud", "cloud_put", {"object": "acct/r1", "data": "aa"})
    engine.run()
    cloud.objects["sw/unrelated"] = b"keep"
    cloud.close_account("acct")
    assert "acct/r1" not in cloud.objects
    assert cloud.objects["sw/unrelated"] == b"keep"  # only the account prefix goes


def test_cloud_nonces_are_deterministic_per_seed():
    texts = []
    for _ in range(2):
        engine, cloud, caller = cloud_world()
        caller.call(engine, "cloud", "cloud_put", {"object": "acct/r1", "data": "aa"})
        engine.run()
        texts.append(engine.trace.text())
    assert texts[0] == texts[1]


# -- provider publication -------------------------------------------------------------


def provider_world(*, provider_acl=("sw/",)):
    engine = Engine(seed="pub-test", links=LinkModel(default_delay=1.0), trace=Trace())
    cloud = CloudStore("cloud")
    engine.add_node(cloud)
    obm = Sink("obm0")
    engine.add_node(obm)
    oem_key = generate_keypair("oem")
    provider_key = generate_keypair("provider")
    account_key = generate_keypair("provider-cloud")
    cloud.create_account("provider-acct", account_key.public, list(provider_acl))
    provider = SwProvider("provider", provider_key, "obm0", cloud_id="cloud",
                          cloud_account=("provider-acct", account_key),
                          oem_pk=oem_key.public)
    engine.add_node(provider)
    return engine, cloud, obm, provider, oem_key


def test_publish_stores_blob_and_submits_pending_update():
    engine, cloud, obm, provider, oem_key = provider_world()
    provider.publish_update(engine, "ecu0", "2.0", b"fw-body")
    engine.run()
    blob = build_sw_binary("ecu0", "2.0", b"fw-body")
    assert cloud.objects[sw_object_id(digest(blob))] == blob
    [msg] = obm.got
    tx = msg.tx
    assert msg.origin_member == "provider"
    assert tx.kind is TxKind.MULTI and tx.sig_2 is None
    assert tx.payload_tag is PayloadTag.SW_UPDATE
    assert tx.payload_digest == digest(blob)
    assert tx.pk_2 == oem_key.public
    assert tx.p_t_id == ZERO_DIGEST
    assert check_integrity(tx).ok


def test_publish_without_write_access_submits_nothing():
    engine, cloud, obm, provider, _ = provider_world(provider_acl=())
    provider.publish_update(engine, "ecu0", "2.0", b"fw-body")
    engine.run()
    assert obm.got == []
    assert cloud.objects == {}
    assert '"event":"publish_failed"' in engine.trace.text()
    assert '"error":"AccessDenied"' in engine.trace.text()


def test_default_binary_body_is_deterministic():
    blobs = []
    for _ in range(2):
        engine, cloud, obm, provider, _ = provider_world()
        provider.publish_update(engine, "ecu0", "2.0")
        engine.run()
        blobs.append(dict(cloud.objects))
    assert blobs[0] == blobs[1] and len(blobs[0]) == 1


# -- manufacturer approval -------------------------------------------------------------


def oem_world():
    engine = Engine(seed="oem-test", links=LinkModel(default_delay=1.0), trace=Trace())
    cloud = CloudStore("cloud")
    engine.add_node(cloud)
    obm = Sink("obm0")
    engine.add_node(obm)
    oem_key = generate_keypair("oem")
    account_key = generate_keypair("oem-cloud")
    cloud.create_account("oem-acct", account_key.public, ["sw/"])
    oem = Oem("oem", oem_key, "obm0", cloud_id="cloud",
              cloud_account=("oem-acct", account_key))
    engine.add_node(oem)
    provider_key = generate_keypair("provider")
    blob = build_sw_binary("ecu0", "2.0", b"fw-body")
    cloud.objects[sw_object_id(digest(blob))] = blob
    pending = build_transaction(TxKind.MULTI, ZERO_DIGEST, digest(blob),
                                PayloadTag.SW_UPDATE, provider_key,
                                recipient_pk=oem_key.public)
    return engine, cloud, obm, oem, pending, provider_key


def test_oem_countersigns_after_independent_rehash():
    engine, cloud, obm, oem, pending, provider_key = oem_world()
    oem.approve(engine, pending)
    engine.run()
    [msg] = obm.got
    final = msg.tx
    assert oem.approvals == [(pending.t_id.hex(), final.t_id.hex())]
    assert final.fully_signed and final.t_id != pending.t_id
    assert final.payload_digest == pending.payload_digest
    assert check_integrity(final).ok


def test_oem_rejects_when_cloud_object_differs_from_digest():
    engine, cloud, obm, oem, pending, _ = oem_world()
    object_id = sw_object_id(pending.payload_digest)
    cloud.objects[object_id] = b"\x00" + cloud.objects[object_id][1:]
    oem.approve(engine, pending)
    engine.run()
    assert obm.got == []
    assert oem.rejections == [(pending.t_id.hex(), "DigestMismatch")]


def test_oem_rejects_when_cloud_object_is_missing():
    engine, cloud, obm, oem, pending, _ = oem_world()
    cloud.objects.clear()
    oem.approve(engine, pending)
    engine.run()
    assert oem.rejections == [(pending.t_id.hex(), "DigestMismatch")]


def test_oem_rejects_forged_provider_signature():
    engine, cloud, obm, oem, pending, _ = oem_world()
    forged = dataclasses.replace(pending, sig_1=generate_keypair("forger").sign(b"x"))
    forged = dataclasses.replace(forged, t_id=forged.compute_t_id())
    oem.approve(engine, forged)
    engine.run()
    assert obm.got == []
    assert oem.rejections == [(forged.t_id.hex(), "BadProviderSignature")]


def test_oem_ignores_updates_addressed_elsewhere():
    engine, cloud, obm, oem, pending, provider_key = oem_world()
    other = build_transaction(TxKind.MULTI, ZERO_DIGEST, pending.payload_digest,
                              PayloadTag.SW_UPDATE, provider_key,
                              recipient_pk=generate_keypair("someone").public)
    oem.approve(engine, other)
    engine.run()
    assert oem.rejections == [(other.t_id.hex(), "NotAddressedToMe")]

    wrong_tag = build_transaction(TxKind.MULTI, ZERO_DIGEST, pending.payload_digest,
                                  PayloadTag.GENERIC, provider_key,
                                  recipient_pk=oem.keypair.public)
    oem.approve(engine, wrong_tag)
    engine.run()
    assert (wrong_tag.t_id.hex(), "NotAddressedToMe") in oem.rejections


def test_oem_leaves_already_final_transactions_alone():
    engine, cloud, obm, oem, pending, _ = oem_world()
    final = countersign(pending, oem.keypair)
    oem.approve(engine, final)
    engine.run()
    assert oem.approvals == [] and oem.rejections == [] and obm.got == []


# -- insurer ---------------------------------------------------------------------------


def insurer_world():
    engine = Engine(seed="ins-test", links=LinkModel(default_delay=1.0), trace=Trace())
    cloud = CloudStore("cloud")
    engine.add_node(cloud)
    manager = BlockManager("obm0", generate_keypair("obm0"), block_size=1)
    manager.manager_names[manager.keypair.public] = "obm0"
    engine.add_node(manager)
    insurer = Insurer("insurer", generate_keypair("insurer"), "obm0", cloud_id="cloud")
    engine.add_node(insurer)
    veh = Vehicle("veh", KeyRing("veh-keys"), "obm0")
    engine.add_node(veh)
    manager.add_member("veh", "vehicle")
    manager.add_member("insurer", "service")
    return engine, cloud, manager, insurer, veh


def test_open_account_provisions_vehicle_and_uploads_access_keys():
    engine, cloud, manager, insurer, veh = insurer_world()
    account_id = insurer.open_account(engine, "veh", "owner-1")
    engine.run()
    assert veh.insurance_account is not None
    got_id, got_key = veh.insurance_account
    assert got_id == account_id
    assert got_key.public == insurer.pk_db[account_id]
    assert cloud.accounts[account_id] == got_key.public
    assert insurer.registry[account_id] == "owner-1"
    [entry] = manager.key_list.entries_for("veh")
    assert entry.requester_pk == insurer.keypair.public
    assert entry.member_pk == got_key.public


def run_claim(*, tamper=False, skip_commit=False, foreign_key=False):
    engine, cloud, manager, insurer, veh = insurer_world()
    insurer.open_account(engine, "veh", "owner-1")
    engine.run()
    if foreign_key:
        veh.insurance_account = (veh.insurance_account[0], generate_keypair("rogue"))
    veh.in_vehicle_storage.extend(
        StorageRecord(float(i), "speed", bytes([i])) for i in range(4))
    veh.trigger_accident(engine, insurer_id="insurer", claim_delay=30.0, tamper=tamper)
    engine.run(max_time=10.0)  # anchor reaches the pool, claim still queued
    if not skip_commit:
        manager.tick(engine, period_index=0, turn_id="obm0")
    engine.run()
    return engine, manager, insurer, veh


def test_honest_claim_is_accepted_against_committed_anchor():
    engine, manager, insurer, veh = run_claim()
    assert veh.claim_results == ["accepted"]
    assert insurer.verdicts[-1][1] == "accepted"
    assert manager.chain.height == 1


def test_tampered_records_fail_digest_comparison():
    _, _, insurer, veh = run_claim(tamper=True)
    assert veh.claim_results == ["DigestMismatch"]


def test_claim_without_committed_anchor_is_rejected():
    _, manager, _, veh = run_claim(skip_commit=True)
    assert veh.claim_results == ["AnchorNotFound"]
    assert manager.chain.height == 0


def test_claim_signed_by_unregistered_key_is_rejected():
    _, _, _, veh = run_claim(foreign_key=True)
    assert veh.claim_results == ["KeyNotRegistered"]


def test_closed_account_surfaces_on_next_vehicle_upload():
    engine, cloud, manager, insurer, veh = insurer_world()
    veh.upload_categories = ("speed",)
    insurer.open_account(engine, "veh", "owner-1")
    engine.run()
    account_id = veh.insurance_account[0]
    veh.cloud_account = veh.insurance_account
    cloud.acl[account_id].add(f"{account_id}/")
    record = StorageRecord(1.0, "speed", b"ok")
    veh.in_vehicle_storage.append(record)
    veh._upload_record(engine, record)
    engine.run()
    assert veh.upload_errors == []
    insurer.close_account(engine, account_id)
    engine.run()
    veh._upload_record(engine, record)
    engine.run()
    assert veh.upload_errors == ["UnknownAccount"]


# -- two-vehicle update walkthrough ------------------------------------------------------
#
# Hand-traced expectation for one publish cycle on a single-cluster network:
#   1. provider stores the binary and submits a half-signed update
#   2. the manager routes that pending tx to the manufacturer (access pair)
#   3. the manufacturer re-downloads, re-hashes, countersigns, resubmits
#   4. the manager pools the final tx and notifies its vehicle members
#   5. both vehicles independently download, verify the digest, and install
#   6. the scheduled turn commits the final tx; lookups find it
#   7. the provider observes the final id and chains its next publish to it


def walkthrough_world():
    engine = Engine(seed="walk", links=LinkModel(default_delay=1.0), trace=Trace())
    ca = generate_keypair("ca")
    cloud = CloudStore("cloud")
    engine.add_node(cloud)

    manager = BlockManager("obm0", generate_keypair("obm0"), block_size=1,
                           ca_pk=ca.public)
    manager.manager_names[manager.keypair.public] = "obm0"
    engine.add_node(manager)

    oem_key = generate_keypair("oem")
    provider_key = generate_keypair("provider")
    oem_cert = issue_certificate(ca, "oem", oem_key.public)

    for account, seed in [("provider-acct", "p-cloud"), ("oem-acct", "o-cloud"),
                          ("veh1-acct", "v1-cloud"), ("veh2-acct", "v2-cloud")]:
        cloud.create_account(account, generate_keypair(seed).public, ["sw/"])

    provider = SwProvider("provider", provider_key, "obm0", cloud_id="cloud",
                          cloud_account=("provider-acct", generate_keypair("p-cloud")),
                          oem_pk=oem_key.public)
    oem = Oem("oem", oem_key, "obm0", cloud_id="cloud",
              cloud_account=("oem-acct", generate_keypair("o-cloud")),
              certificate=oem_cert)
    engine.add_node(provider)
    engine.add_node(oem)

    vehicles = []
    for i in (1, 2):
        veh = Vehicle(f"veh{i}", KeyRing(f"veh{i}-keys"), "obm0",
                      oem_pk=oem_key.public,
                      cloud_account=(f"veh{i}-acct", generate_keypair(f"v{i}-cloud")))
        engine.add_node(veh)
        vehicles.append(veh)

    manager.add_member("provider", "service")
    manager.add_member("oem", "service")
    for veh in vehicles:
        manager.add_member(veh.node_id, "vehicle")
    manager.certified[oem_key.public] = oem_cert
    # access pairs in both directions so each party sees the final transaction
    manager.upload_key_pair(engine.trace, engine.now, "oem",
                            provider_key.public, oem_key.public)
    manager.upload_key_pair(engine.trace, engine.now, "provider",
                            oem_key.public, provider_key.public)
    return engine, cloud, manager, provider, oem, vehicles


def test_update_walkthrough_single_cycle():
    engine, cloud, manager, provider, oem, (veh1, veh2) = walkthrough_world()
    provider.publish_update(engine, "ecu0", "2.0", b"fw-2.0")
    engine.run()

    blob = build_sw_binary("ecu0", "2.0", b"fw-2.0")
    # 1. binary stored under its content address
    assert cloud.objects[sw_object_id(digest(blob))] == blob
    # 2-3. pending routed to the manufacturer, exactly one approval back
    [(pending_tid, final_tid)] = oem.approvals
    # 4. the pool holds the final tx, nothing was dropped anywhere
    assert [tx.t_id.hex() for tx in manager.pool] == [final_tid]
    assert manager.drops == {"invalid": 0, "duplicate": 0, "no_match": 0}
    # 5. both vehicles installed the same digest the provider published
    expected = ("2.0", digest(blob).hex())
    assert veh1.installed_sw == {"ecu0": expected}
    assert veh2.installed_sw == {"ecu0": expected}
    assert veh1.update_outcomes == [(final_tid, "installed")]
    # 6. the scheduled turn commits it; a lookup then succeeds
    manager.tick(engine, period_index=0, turn_id="obm0")
    engine.run()
    assert manager.chain.height == 1
    assert verify_chain(manager.chain)
    from overchain.crypto import Digest
    assert manager.chain.get_tx(Digest.from_hex(final_tid)) is not None
    # 7. the provider observed the final id for chaining
    assert provider.last_final_tid.hex() == final_tid


def test_update_walkthrough_second_publish_chains_to_first():
    engine, cloud, manager, provider, oem, vehicles = walkthrough_world()
    provider.publish_update(engine, "ecu0", "2.0", b"fw-2.0")
    engine.run()
    manager.tick(engine, period_index=0, turn_id="obm0")
    engine.run()
    first_final = provider.last_final_tid

    provider.publish_update(engine, "ecu0", "2.1", b"fw-2.1")
    engine.run()
    [msg] = [tx for tx in manager.pool]
    assert msg.p_t_id == first_final
    assert [v.installed_sw["ecu0"][0] for v in vehicles] == ["2.1", "2.1"]


def test_update_walkthrough_is_deterministic():
    texts = []
    for _ in range(2):
        engine, cloud, manager, provider, oem, vehicles = walkthrough_world()
        provider.publish_update(engine, "ecu0", "2.0", b"fw-2.0")
        engine.run()
        manager.tick(engine, period_index=0, turn_id="obm0")
        engine.run()
        texts.append(engine.trace.text())
    assert texts[0] == texts[1]
