"""Metric extraction and expectation checking over run traces.

Everything here is computed from the JSON-lines trace alone — no live
simulator state — so a stored trace file can be re-analyzed later and the
numbers reconcile exactly with the events that produced them.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Any, Optional

from .config import Expectation, ScenarioConfig

__all__ = [
    "ExpectationResult",
    "ScenarioReport",
    "build_report",
    "compute_metrics",
    "evaluate_expectations",
    "parse_trace",
    "render_json",
    "render_plain",
]


def parse_trace(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# Reason strings each counter family can produce.  Pre-seeding them with zeros
# lets expectations assert "this never happened" without tripping over a
# missing key in a run where it indeed never happened.
_REJECTION_REASONS = ("invalid", "NotFromMyOem", "CloudAuthFailed", "DownloadMissing",
                      "HashMismatch", "NotAddressedToMe", "BadProviderSignature",
                      "DigestMismatch")
_DROP_REASONS = ("invalid", "duplicate", "no_match")
_CLAIM_VERDICTS = ("accepted", "AnchorNotFound", "KeyNotRegistered", "DigestMismatch")
_UPLOAD_ERRORS = ("UnknownAccount", "BadProof", "NoSession", "AccessDenied", "NotFound")
_SKIP_REASONS = ("all_above_threshold", "hysteresis")


def _zero_filled(counter: Counter, keys: tuple) -> dict:
    merged = {key: 0 for key in keys}
    merged.update(counter)
    return dict(sorted(merged.items()))


# -- metric extraction --------------------------------------------------------------


def _verification_trend(validated: dict, min_blocks: int) -> dict:
    """Per-generator mean signature checks in the first vs final third of its
    accepted blocks (validators' view, averaged per block height)."""
    out: dict[str, Any] = {"ratio": {}, "first_third_mean": {}, "final_third_mean": {}}
    ratios = []
    for generator, by_height in sorted(validated.items()):
        series = [sum(counts) / len(counts)
                  for _, counts in sorted(by_height.items())]
        if len(series) < max(3, min_blocks):
            continue
        third = len(series) // 3
        first = sum(series[:third]) / third
        final = sum(series[-third:]) / third
        out["first_third_mean"][generator] = round(first, 6)
        out["final_third_mean"][generator] = round(final, 6)
        ratio = round(final / first, 6) if first > 0 else 0.0
        out["ratio"][generator] = ratio
        ratios.append(ratio)
    if ratios:
        out["max_ratio"] = max(ratios)
    return out


def _dtm_metrics(throughput: dict) -> dict:
    max_run = 0
    final_flags = []
    trajectories = {}
    for manager, rows in sorted(throughput.items()):
        rows.sort(key=lambda r: r["period"])
        trajectories[manager] = [round(r["utilization"], 6) for r in rows]
        run = 0
        last_active = None
        for row in rows:
            low, high = row["band"]
            in_band = low <= row["utilization"] <= high
            if row["rate"] > 0:
                last_active = in_band
                if not in_band:
                    run += 1
                    max_run = max(max_run, run)
                else:
                    run = 0
            else:
                run = 0
        if last_active is not None:
            final_flags.append(last_active)
    return {
        "max_out_of_band_run": max_run,
        "final_in_band": int(all(final_flags)) if final_flags else 1,
        "utilization": trajectories,
    }


def compute_metrics(lines: list[dict]) -> dict:
    traffic_recipient: dict[str, str] = {}
    attack_target_obm: dict[str, str] = {}
    delivered_traffic: Counter = Counter()
    installs_by_version: Counter = Counter()
    rejections: Counter = Counter()
    drops_total: Counter = Counter()
    drops_by_manager: dict[str, Counter] = defaultdict(Counter)
    deliveries = Counter()
    attack = Counter()
    claims: Counter = Counter()
    upload_errors: Counter = Counter()
    handover_skipped: Counter = Counter()
    counts: Counter = Counter()
    blocks_formed: Counter = Counter()
    validated: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    throughput: dict[str, list] = defaultdict(list)
    summaries: dict[str, dict] = {}
    scenario_end: Optional[dict] = None

    for line in lines:
        event = line["event"]
        if event == "traffic_tx":
            traffic_recipient[line["t_id"]] = line["recipient"]
        elif event == "attack_tx":
            attack_target_obm[line["t_id"]] = line["target_obm"]
            attack["sent"] += 1
        elif event == "tx_delivered":
            deliveries["pending" if line["pending"] else "final"] += 1
            tid = line["t_id"]
            if line["pending"] and traffic_recipient.get(tid) == line["member"]:
                delivered_traffic[tid] += 1
            if tid in attack_target_obm:
                attack["delivered"] += 1
        elif event == "tx_dropped":
            drops_total[line["reason"]] += 1
            drops_by_manager[line["actor"]][line["reason"]] += 1
            tid = line["t_id"]
            if tid in attack_target_obm:
                attack["dropped"] += 1
                if attack_target_obm[tid] == line["actor"]:
                    attack["dropped_at_target_obm"] += 1
        elif event == "installed":
            installs_by_version[line["version"]] += 1
        elif event in ("update_rejected", "approval_rejected"):
            rejections[line["reason"]] += 1
        elif event == "claim_verified":
            claims[line["verdict"]] += 1
        elif event == "upload_rejected":
            upload_errors[line["error"]] += 1
        elif event == "handover_skipped":
            handover_skipped[line["reason"]] += 1
        elif event == "block_formed":
            blocks_formed[line["actor"]] += 1
        elif event == "block_validated" and line["ok"]:
            validated[line["generator"]][line["height"]].append(
                line["verification_count"])
        elif event == "throughput":
            throughput[line["actor"]].append(line)
        elif event == "manager_summary":
            summaries[line["actor"]] = line
        elif event == "scenario_end":
            scenario_end = line
        if event in ("tx_pooled", "tx_parked", "tx_unparked", "block_rejected",
                     "anchor", "backup", "handover", "probe", "published",
                     "publish_failed", "approved", "update_notified",
                     "notify_suppressed", "claim_filed", "record_uploaded",
                     "cloud_denied", "cloud_tampered", "forged_publish",
                     "forged_final", "accident", "countersigned",
                     "account_created", "account_closed", "member_joined",
                     "member_left", "traffic_tx", "installed"):
            counts[event] += 1

    traffic_sent = len(traffic_recipient)
    traffic_done = sum(1 for tid in traffic_recipient if delivered_traffic[tid] >= 1)
    duplicates = sum(1 for tid in traffic_recipient if delivered_traffic[tid] > 1)

    heights = {m: s["blocks"] for m, s in sorted(summaries.items())}
    digests = {s["chain_digest"] for s in summaries.values()}
    sw_finals = [s["sw_finals"] for s in summaries.values()]

    metrics = {
        "installs": counts["installed"],
        "installs_by_version": dict(sorted(installs_by_version.items())),
        "rejections": _zero_filled(rejections, _REJECTION_REASONS),
        "publishes": counts["published"],
        "publish_failures": counts["publish_failed"],
        "approvals": counts["approved"],
        "notifications": counts["update_notified"],
        "notifications_suppressed": counts["notify_suppressed"],
        "drops": _zero_filled(drops_total, _DROP_REASONS),
        "drops_by_manager": {m: dict(sorted(c.items()))
                             for m, c in sorted(drops_by_manager.items())},
        "deliveries": dict(sorted(deliveries.items())),
        "pooled": counts["tx_pooled"],
        "parked": counts["tx_parked"],
        "unparked": counts["tx_unparked"],
        "anchors": counts["anchor"],
        "backups": counts["backup"],
        "countersigns": counts["countersigned"],
        "traffic": {
            "sent": traffic_sent,
            "delivered": traffic_done,
            "success": round(traffic_done / traffic_sent, 6) if traffic_sent else 1.0,
            "duplicate_deliveries": duplicates,
        },
        "attack": {
            "sent": attack["sent"],
            "delivered": attack["delivered"],
            "dropped": attack["dropped"],
            "dropped_at_target_obm": attack["dropped_at_target_obm"],
            "forged_publishes": counts["forged_publish"],
            "forged_finals": counts["forged_final"],
        },
        "claims": {"filed": counts["claim_filed"],
                   "verdicts": _zero_filled(claims, _CLAIM_VERDICTS)},
        "cloud": {
            "uploads": counts["record_uploaded"],
            "upload_errors": _zero_filled(upload_errors, _UPLOAD_ERRORS),
            "denied": counts["cloud_denied"],
            "tampered": counts["cloud_tampered"],
            "accounts_created": counts["account_created"],
            "accounts_closed": counts["account_closed"],
        },
        "handover": {"count": counts["handover"], "probes": counts["probe"],
                     "skipped": _zero_filled(handover_skipped, _SKIP_REASONS)},
        "blocks": {
            "per_generator": dict(sorted(blocks_formed.items())),
            "min_per_generator": min(blocks_formed.values()) if blocks_formed else 0,
            "rejected": counts["block_rejected"],
            "height_min": min(heights.values()) if heights else 0,
            "height_max": max(heights.values()) if heights else 0,
        },
        "verification": _verification_trend(validated, min_blocks=9),
        "dtm": _dtm_metrics(throughput),
        "chain": {
            "heights": heights,
            "digests_identical": int(len(digests) <= 1),
            "all_valid": int(bool(scenario_end and scenario_end["all_valid"])),
            "equal": int(bool(scenario_end and scenario_end["chains_equal"])),
            "residual_pool_max": max((s["pool_depth"] for s in summaries.values()),
                                     default=0),
            "residual_waiting_max": max((s["waiting"] for s in summaries.values()),
                                        default=0),
            "sw_finals_min": min(sw_finals) if sw_finals else 0,
            "sw_finals_max": max(sw_finals) if sw_finals else 0,
        },
    }
    return metrics


# -- expectation checking --------------------------------------------------------------


@dataclass(frozen=True)
class ExpectationResult:
    metric: str
    op: str
    value: Any
    actual: Any
    passed: bool
    note: str = ""


def _lookup(metrics: dict, path: str):
    node: Any = metrics
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(path)
        node = node[part]
    return node


def evaluate_expectations(metrics: dict, expectations) -> list[ExpectationResult]:
    results = []
    for exp in expectations:
        try:
            actual = _lookup(metrics, exp.metric)
        except KeyError:
            results.append(ExpectationResult(exp.metric, exp.op, exp.value,
                                             None, False, "metric not found"))
            continue
        if not isinstance(actual, (int, float)) or isinstance(actual, bool):
            actual = int(actual) if isinstance(actual, bool) else actual
        ok, note = _compare(actual, exp)
        results.append(ExpectationResult(exp.metric, exp.op, exp.value,
                                         actual, ok, note))
    return results


def _compare(actual, exp: Expectation):
    if not isinstance(actual, (int, float)):
        return False, f"not a number: {actual!r}"
    if exp.op == "between":
        lo, hi = exp.value
        return (lo - exp.tol <= actual <= hi + exp.tol), ""
    value = exp.value
    if exp.op == "eq":
        return abs(actual - value) <= exp.tol, ""
    if exp.op == "ne":
        return abs(actual - value) > exp.tol, ""
    if exp.op == "ge":
        return actual >= value - exp.tol, ""
    if exp.op == "le":
        return actual <= value + exp.tol, ""
    if exp.op == "gt":
        return actual > value, ""
    if exp.op == "lt":
        return actual < value, ""
    return False, f"unknown op {exp.op}"


@dataclass(frozen=True)
class ScenarioReport:
    name: str
    seed: int
    metrics: dict
    results: tuple
    passed: bool


def build_report(trace_text: str, config: ScenarioConfig) -> ScenarioReport:
    metrics = compute_metrics(parse_trace(trace_text))
    results = tuple(evaluate_expectations(metrics, config.expectations))
    passed = all(r.passed for r in results)
    return ScenarioReport(config.name, config.seed, metrics, results, passed)


# -- rendering ---------------------------------------------------------------------------


def _flatten(metrics: dict, prefix: str = "") -> list[tuple[str, Any]]:
    rows = []
    for key, value in metrics.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, f"{path}."))
        elif isinstance(value, list):
            rows.append((path, f"[{len(value)} values]"))
        else:
            rows.append((path, value))
    return rows


def render_plain(report: ScenarioReport) -> str:
    verdict = "PASS" if report.passed else "FAIL"
    lines = [f"scenario {report.name}  seed {report.seed}  {verdict}"]
    rows = _flatten(report.metrics)
    width = max((len(k) for k, _ in rows), default=0)
    lines.append("-" * (width + 12))
    for key, value in rows:
        lines.append(f"{key:<{width}}  {value}")
    if report.results:
        lines.append("")
        lines.append("expectations:")
        for r in report.results:
            status = "PASS" if r.passed else "FAIL"
            note = f"  ({r.note})" if r.note else ""
            lines.append(f"  {status}  {r.metric} {r.op} {r.value}"
                         f"  actual={r.actual}{note}")
    return "\n".join(lines) + "\n"


def render_json(report: ScenarioReport) -> str:
    payload = {
        "name": report.name,
        "seed": report.seed,
        "passed": report.passed,
        "metrics": report.metrics,
        "expectations": [
            {"metric": r.metric, "op": r.op, "value": r.value,
             "actual": r.actual, "passed": r.passed, "note": r.note}
            for r in report.results
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
