"""Scenario orchestration: build the simulated network from a ScenarioConfig
and drive it — background traffic, timed directives, the shared block-period
clock, and the end-of-run drain — producing a trace the report reads.

Node naming is fixed by the builder: managers are ``obm0..obmN-1``, vehicles
``veh0..vehM-1``, the object store is ``cloud``; service ids come from the
roster. All key material derives from ``<scenario seed>:key:<node>`` so runs
are reproducible from the config alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .config import Directive, ScenarioConfig, TrafficPhase
from .crypto import ZERO_DIGEST, KeyRing, digest, generate_keypair, issue_certificate
from .ledger import (
    PayloadTag,
    TxKind,
    build_transaction,
    countersign,
    schedule_block_turn,
    verify_chain,
)
from .manager import BlockManager
from .messages import BaseActor, Timer, TxMessage
from .services import CloudStore, Insurer, Oem, SwProvider, sw_object_id
from .simnet import Engine, LinkModel, Trace
from .swformat import build_sw_binary
from .vehicle import Vehicle

__all__ = ["World", "build_world", "run_scenario"]


class TrafficDriver(BaseActor):
    """Generates background two-party transactions between fixed vehicle
    pairs; pair k is (veh{2k}, veh{2k+1}) with the even vehicle requesting.
    Each transaction chains to the requester's most recent completed one."""

    def __init__(self, node_id: str, vehicles: dict[str, Vehicle]):
        super().__init__(node_id)
        self.vehicles = vehicles
        self.sent = 0

    def start_phase(self, engine, index: int, phase: TrafficPhase) -> None:
        engine.schedule_at(phase.start, self.node_id,
                           Timer("traffic", {"phase": index}))

    def on_timer(self, engine, timer: Timer) -> None:
        if timer.kind != "traffic":
            return
        phase_index = timer.data["phase"]
        phase = self._phases[phase_index]
        if engine.now > phase.stop:
            return
        for pair in range(phase.pairs):
            self._shoot(engine, pair)
        if engine.now + phase.interval <= phase.stop:
            engine.schedule(phase.interval, self.node_id,
                            Timer("traffic", {"phase": phase_index}))

    def attach_phases(self, phases) -> None:
        self._phases = list(phases)

    def _shoot(self, engine, pair: int) -> None:
        requester = self.vehicles[f"veh{2 * pair}"]
        partner = self.vehicles[f"veh{2 * pair + 1}"]
        req_key = requester.keys.interaction_key()
        previous = ZERO_DIGEST
        for tx in reversed(requester.received_txs):
            if tx.fully_signed and tx.pk_1 == req_key.public:
                previous = tx.t_id
                break
        self.sent += 1
        payload = digest(f"traffic:{pair}:{self.sent}".encode())
        tx = build_transaction(TxKind.MULTI, previous, payload,
                               PayloadTag.GENERIC, req_key,
                               recipient_pk=partner.keys.current.public)
        engine.trace.emit(engine.now, self.node_id, "traffic_tx",
                          t_id=tx.t_id.hex(), sender=requester.node_id,
                          recipient=partner.node_id)
        requester.submit(engine, tx)


class Attacker(BaseActor):
    """Adversarial traffic source: unauthorized transaction floods and
    forged software-update submissions. Holds its own key material that no
    key list or certificate covers."""

    def __init__(self, node_id: str, obm_id: str, seed: str):
        super().__init__(node_id)
        self.obm_id = obm_id
        self.keypair = generate_keypair(f"{seed}:key:{node_id}")
        self.second_keypair = generate_keypair(f"{seed}:key:{node_id}:2")
        self.shots = 0

    def _submit(self, engine, tx) -> None:
        engine.send(self.node_id, self.obm_id,
                    TxMessage(tx, origin_member=self.node_id))

    def on_timer(self, engine, timer: Timer) -> None:
        if timer.kind != "flood":
            return
        data = timer.data
        self.shots += 1
        tx = build_transaction(
            TxKind.MULTI, ZERO_DIGEST,
            digest(f"{self.node_id}:flood:{self.shots}".encode()),
            PayloadTag.GENERIC, self.keypair,
            recipient_pk=data["target_pk"])
        engine.trace.emit(engine.now, self.node_id, "attack_tx",
                          t_id=tx.t_id.hex(), target=data["target"],
                          target_obm=data["target_obm"])
        self._submit(engine, tx)

    def forge_publish(self, engine, ecu: str, version: str, oem_pk) -> None:
        blob = build_sw_binary(ecu, version, f"{self.node_id}:{version}".encode())
        tx = build_transaction(TxKind.MULTI, ZERO_DIGEST, digest(blob),
                               PayloadTag.SW_UPDATE, self.keypair,
                               recipient_pk=oem_pk)
        engine.trace.emit(engine.now, self.node_id, "forged_publish",
                          t_id=tx.t_id.hex(), version=version)
        self._submit(engine, tx)

    def forge_final(self, engine, ecu: str, version: str) -> None:
        blob = build_sw_binary(ecu, version, f"{self.node_id}:{version}".encode())
        pending = build_transaction(TxKind.MULTI, ZERO_DIGEST, digest(blob),
                                    PayloadTag.SW_UPDATE, self.keypair,
                                    recipient_pk=self.second_keypair.public)
        final = countersign(pending, self.second_keypair)
        engine.trace.emit(engine.now, self.node_id, "forged_final",
                          t_id=final.t_id.hex(), version=version)
        self._submit(engine, final)


@dataclass
class World:
    config: ScenarioConfig
    engine: Engine
    managers: list[BlockManager]
    cloud: CloudStore
    vehicles: dict[str, Vehicle]
    oem: Optional[Oem] = None
    providers: dict[str, SwProvider] = field(default_factory=dict)
    insurer: Optional[Insurer] = None
    attacker: Optional[Attacker] = None
    traffic: Optional[TrafficDriver] = None
    driver: Optional["ScenarioDriver"] = None


class ScenarioDriver(BaseActor):
    """Owns the scenario clock: the network-wide block period, the scripted
    directives, and the end-of-run drain."""

    def __init__(self, node_id: str, world: World):
        super().__init__(node_id)
        self.world = world
        self._ddos_seq = 0

    # -- block period clock ------------------------------------------------------

    def start(self, engine) -> None:
        cfg = self.world.config
        first = cfg.ledger.block_period
        if first <= cfg.duration:
            engine.schedule_at(first, self.node_id, Timer("period", {"index": 0}))
        for i, directive in enumerate(cfg.script):
            engine.schedule_at(directive.at, self.node_id,
                               Timer("directive", {"index": i}))
        if self.world.traffic is not None:
            for p, phase in enumerate(cfg.traffic):
                self.world.traffic.start_phase(engine, p, phase)

    def on_timer(self, engine, timer: Timer) -> None:
        if timer.kind == "period":
            self._period(engine, timer.data["index"])
        elif timer.kind == "directive":
            self._directive(engine, self.world.config.script[timer.data["index"]])

    def _period(self, engine, index: int) -> None:
        managers = self.world.managers
        ids = [m.node_id for m in managers]
        turn = schedule_block_turn(index, ids)
        for m in managers:
            m.tick(engine, index, turn)
        turn_manager = next(m for m in managers if m.node_id == turn)
        next_at = engine.now + turn_manager.throughput.block_period
        if next_at <= self.world.config.duration:
            engine.schedule_at(next_at, self.node_id,
                               Timer("period", {"index": index + 1}))

    # -- scripted directives -------------------------------------------------------

    def _directive(self, engine, directive: Directive) -> None:
        getattr(self, f"_do_{directive.action}")(engine, directive.params)

    def _do_publish_update(self, engine, params: dict) -> None:
        provider = self.world.providers[params["provider"]]
        body = params["body"].encode() if "body" in params else None
        provider.publish_update(engine, params["ecu"], params["version"], body)

    def _do_tamper_cloud_object(self, engine, params: dict) -> None:
        object_id = params.get("object")
        if object_id is None:
            version = params["version"]
            for provider in self.world.providers.values():
                for ver, oid, _ in provider.published:
                    if ver == version:
                        object_id = oid
        blob = self.world.cloud.objects.get(object_id) if object_id else None
        if blob is None:
            engine.trace.emit(engine.now, self.node_id, "tamper_failed",
                              object=object_id or "?")
            return
        self.world.cloud.objects[object_id] = bytes([blob[0] ^ 0x01]) + blob[1:]
        engine.trace.emit(engine.now, self.node_id, "cloud_tampered",
                          object=object_id)

    def _do_start_ddos(self, engine, params: dict) -> None:
        world = self.world
        target = world.vehicles[params["target"]]
        target_pk = target.keys.current.public
        target_obm = target.obm_id
        # attackers flood from other clusters toward the target's manager
        homes = [m.node_id for m in world.managers if m.node_id != target_obm] \
            or [target_obm]
        for i in range(params["attackers"]):
            self._ddos_seq += 1
            atk = Attacker(f"atk{self._ddos_seq}", homes[i % len(homes)],
                           f"{world.config.name}:{world.config.seed}")
            engine.add_node(atk)
            if i < params.get("keyed_attackers", 0):
                home = next(m for m in world.managers
                            if m.node_id == target_obm)
                home.upload_key_pair(engine.trace, engine.now,
                                     target.node_id, atk.keypair.public,
                                     target_pk)
            interval = params["interval"]
            for shot in range(params["tx_per_attacker"]):
                engine.schedule(shot * interval, atk.node_id,
                                Timer("flood", {"target": target.node_id,
                                                "target_obm": target_obm,
                                                "target_pk": target_pk}))

    def _do_open_account(self, engine, params: dict) -> None:
        self.world.insurer.open_account(engine, params["vehicle"], params["owner"])

    def _do_close_account(self, engine, params: dict) -> None:
        vehicle = self.world.vehicles[params["vehicle"]]
        if vehicle.insurance_account is None:
            engine.trace.emit(engine.now, self.node_id, "directive_failed",
                              action="close_account", vehicle=params["vehicle"],
                              reason="no insurance account")
            return
        self.world.insurer.close_account(engine, vehicle.insurance_account[0])

    def _do_trigger_accident(self, engine, params: dict) -> None:
        vehicle = self.world.vehicles[params["vehicle"]]
        vehicle.trigger_accident(engine, insurer_id=self.world.insurer.node_id,
                                 claim_delay=params.get("claim_delay", 0.0),
                                 tamper=params.get("tamper", False))

    def _do_move_vehicle(self, engine, params: dict) -> None:
        vehicle_id = params["vehicle"]
        for obm, delay in params["links"].items():
            engine.links.set_link(vehicle_id, obm, float(delay))
        engine.trace.emit(engine.now, self.node_id, "vehicle_moved",
                          vehicle=vehicle_id,
                          links={k: float(v) for k, v in params["links"].items()})

    def _do_impersonate_provider(self, engine, params: dict) -> None:
        self.world.attacker.forge_publish(engine, params["ecu"], params["version"],
                                          self.world.oem.keypair.public)

    def _do_impersonate_oem(self, engine, params: dict) -> None:
        self.world.attacker.forge_final(engine, params["ecu"], params["version"])

    # -- end of run -----------------------------------------------------------------

    def finalize(self, engine) -> None:
        """Drain pools into final blocks, then emit per-manager summaries and
        the cross-manager consistency verdict."""
        managers = self.world.managers
        for m in managers:
            m.expire_waiting(engine, expire_all=True)
        while any(m.pool for m in managers):
            progressed = False
            for m in managers:
                if m.pool and m.flush_turn(engine):
                    progressed = True
                engine.run()
            if not progressed:
                break
        for m in managers:
            m.emit_summary(engine)
        digests = {m.node_id: "\n".join(m.chain.dump_lines()) for m in managers}
        unique = len(set(digests.values()))
        all_valid = all(verify_chain(m.chain) for m in managers)
        engine.trace.emit(engine.now, self.node_id, "scenario_end",
                          chains_equal=unique == 1, all_valid=all_valid,
                          heights={m.node_id: m.chain.height for m in managers})


# -- construction ------------------------------------------------------------------


def build_world(config: ScenarioConfig) -> World:
    seed = f"{config.name}:{config.seed}"
    links = LinkModel(default_delay=config.network.default_delay,
                      jitter=config.network.jitter)
    for a, b, delay in config.network.links:
        links.set_link(a, b, delay)
    engine = Engine(seed=seed, links=links, trace=Trace())

    ca = generate_keypair(f"{seed}:ca")
    ledger = config.ledger
    managers = []
    for node_id in config.manager_ids:
        manager = BlockManager(
            node_id, generate_keypair(f"{seed}:key:{node_id}"),
            block_size=ledger.block_size, block_period=ledger.block_period,
            min_check_fraction=ledger.min_check_fraction,
            trust_ramp=ledger.trust_ramp,
            utilization_low=ledger.utilization_low,
            utilization_high=ledger.utilization_high,
            period_min=ledger.period_min, period_max=ledger.period_max,
            pending_timeout=ledger.pending_timeout, ca_pk=ca.public,
            notify_requires_certificate=ledger.notify_requires_certificate)
        managers.append(manager)
        engine.add_node(manager)
    for manager in managers:
        manager.peers = [m.node_id for m in managers if m is not manager]
        manager.manager_count = len(managers)
        for other in managers:
            manager.manager_names[other.keypair.public] = other.node_id

    cloud = CloudStore("cloud", retain_closed_objects=config.retain_closed_objects)
    engine.add_node(cloud)
    by_id = {m.node_id: m for m in managers}

    world = World(config=config, engine=engine, managers=managers,
                  cloud=cloud, vehicles={})

    oem_key = None
    if config.oem is not None:
        oem_id = config.oem.service_id
        oem_key = generate_keypair(f"{seed}:key:{oem_id}")
        cert = issue_certificate(ca, oem_id, oem_key.public)
        account_key = generate_keypair(f"{seed}:cloud:{oem_id}")
        cloud.create_account(f"{oem_id}-acct", account_key.public, ["sw/"])
        world.oem = Oem(oem_id, oem_key, config.oem.obm, cloud_id="cloud",
                        cloud_account=(f"{oem_id}-acct", account_key),
                        certificate=cert)
        engine.add_node(world.oem)
        by_id[config.oem.obm].add_member(oem_id, "service")
        for manager in managers:
            manager.certified[oem_key.public] = cert

    for spec in config.providers:
        pid = spec.service_id
        provider_key = generate_keypair(f"{seed}:key:{pid}")
        account_key = generate_keypair(f"{seed}:cloud:{pid}")
        cloud.create_account(f"{pid}-acct", account_key.public, ["sw/"])
        provider = SwProvider(pid, provider_key, spec.obm, cloud_id="cloud",
                              cloud_account=(f"{pid}-acct", account_key),
                              oem_pk=oem_key.public)
        world.providers[pid] = provider
        engine.add_node(provider)
        by_id[spec.obm].add_member(pid, "service")
        # the update pair in both directions: the manufacturer sees pendings
        # and finals; the provider sees the recomputed final for chaining
        by_id[config.oem.obm].upload_key_pair(
            engine.trace, 0.0, config.oem.service_id,
            provider_key.public, oem_key.public)
        by_id[spec.obm].upload_key_pair(
            engine.trace, 0.0, pid, oem_key.public, provider_key.public)

    if config.insurer is not None:
        iid = config.insurer.service_id
        world.insurer = Insurer(iid, generate_keypair(f"{seed}:key:{iid}"),
                                config.insurer.obm, cloud_id="cloud")
        engine.add_node(world.insurer)
        by_id[config.insurer.obm].add_member(iid, "service")

    if config.attacker is not None:
        world.attacker = Attacker(config.attacker.service_id,
                                  config.attacker.obm, seed)
        engine.add_node(world.attacker)

    for spec in config.vehicles:
        vid = spec.vehicle_id
        account_key = generate_keypair(f"{seed}:cloud:{vid}")
        cloud.create_account(f"{vid}-acct", account_key.public, ["sw/"])
        vehicle = Vehicle(
            vid, KeyRing(f"{seed}:key:{vid}",
                         rotate_per_interaction=spec.rotate_keys),
            spec.obm,
            oem_pk=oem_key.public if oem_key else None,
            cloud_account=(f"{vid}-acct", account_key),
            anchor_interval=spec.anchor_interval,
            backup_interval=spec.backup_interval,
            record_interval=spec.record_interval,
            record_categories=spec.record_categories,
            upload_categories=spec.upload_categories,
            probe_interval=spec.probe_interval,
            handover_threshold=spec.handover_threshold,
            handover_improvement=spec.handover_improvement,
            probe_samples=spec.probe_samples,
            candidate_obms=spec.candidate_obms)
        world.vehicles[vid] = vehicle
        engine.add_node(vehicle)
        by_id[spec.obm].add_member(vid, "vehicle")
        vehicle.stop_at = config.duration
        vehicle.start(engine)

    max_pairs = max((phase.pairs for phase in config.traffic), default=0)
    for pair in range(max_pairs):
        a = world.vehicles[f"veh{2 * pair}"]
        b = world.vehicles[f"veh{2 * pair + 1}"]
        a_pk, b_pk = a.keys.current.public, b.keys.current.public
        b.access_set.append((a_pk, b_pk))
        a.access_set.append((b_pk, a_pk))
        by_id[b.obm_id].upload_key_pair(engine.trace, 0.0, b.node_id, a_pk, b_pk)
        by_id[a.obm_id].upload_key_pair(engine.trace, 0.0, a.node_id, b_pk, a_pk)

    world.traffic = TrafficDriver("traffic", world.vehicles)
    world.traffic.attach_phases(config.traffic)
    engine.add_node(world.traffic)
    world.driver = ScenarioDriver("driver", world)
    engine.add_node(world.driver)
    return world


def run_scenario(config: ScenarioConfig) -> World:
    """Execute one scenario to completion; the trace is on world.engine.trace."""
    world = build_world(config)
    world.driver.start(world.engine)
    world.engine.run(max_time=config.duration)
    world.engine.run()  # settle whatever was in flight at the cutoff
    world.driver.finalize(world.engine)
    return world
