"""Run the bundled software-update scenarios and inspect the outcome from the
inside: what each vehicle installed, what landed on every ledger copy, and how
the same rollout fails fleet-wide when the stored binary is altered.

Run:  python3 demos/update_rollout.py
"""
from overchain.cli import bundled_scenarios
from overchain.config import load_scenario
from overchain.ledger import PayloadTag, verify_chain
from overchain.report import build_report
from overchain.world import run_scenario


def rollout(name: str) -> None:
    config = load_scenario(bundled_scenarios()[name])
    world = run_scenario(config)
    report = build_report(world.engine.trace.text(), config)

    print(f"\n=== {name} (seed {config.seed}) ===")
    m = report.metrics
    print(f"published {m['publishes']}, countersigned {m['approvals']}, "
          f"notified {m['notifications']}, installed {m['installs']}/20")

    versions = {}
    for vehicle in world.vehicles.values():
        for ecu, (version, _digest) in vehicle.installed_sw.items():
            versions.setdefault((ecu, version), 0)
            versions[(ecu, version)] += 1
    if versions:
        for (ecu, version), count in sorted(versions.items()):
            print(f"  {count} vehicles run {ecu} {version}")
    else:
        reasons = {k: v for k, v in m["rejections"].items() if v}
        print(f"  nothing installed; refusals: {reasons}")

    for manager in world.managers:
        finals = sum(1 for tx in manager.chain.all_transactions()
                     if tx.payload_tag is PayloadTag.SW_UPDATE
                     and tx.fully_signed)
        print(f"  {manager.node_id}: height {manager.chain.height}, "
              f"{finals} committed update release(s), "
              f"audit {'ok' if verify_chain(manager.chain) else 'FAILED'}")


def main() -> None:
    rollout("wrsu_happy_path")
    rollout("wrsu_tampered")


if __name__ == "__main__":
    main()
