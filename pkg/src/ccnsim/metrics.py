"""Per-run metrics in long format: (entity, metric, value) rows."""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Optional

METRICS_COLUMNS = ("scenario_id", "seed", "entity", "metric", "value")
ATTACK_COLUMNS = ("scenario_id", "seed", "attack_id", "variant", "param_hash", "metric", "value")
SCHEMA_VERSION = 1


def fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(round(value, 9))
    return str(value)


@dataclass
class Metrics:
    scenario_id: str = "adhoc"
    seed: int = 0
    rows: list = field(default_factory=list)

    def add(self, entity: str, metric: str, value):
        if value is None:
            return
        self.rows.append((entity, metric, value))

    def get(self, entity: str, metric: str, default=None):
        for e, m, v in self.rows:
            if e == entity and m == metric:
                return v
        return default

    def entity(self, entity: str) -> dict:
        return {m: v for e, m, v in self.rows if e == entity}

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for e, m, v in self.rows:
            w.writerow((self.scenario_id, self.seed, e, m, fmt(v)))
        return buf.getvalue()


def hit_rate(hits: int, lookups: int) -> Optional[float]:
    return hits / lookups if lookups else None


def collect_metrics(engine) -> Metrics:
    from .nodes import Host, Producer, RouterNode

    out = Metrics(engine.scenario_id, engine.seed)
    now = engine.now
    for nid, node in engine.nodes.items():
        if isinstance(node, RouterNode):
            r = node.router
            c = r.counters
            for key in sorted(c):
                out.add(nid, key, c[key])
            out.add(nid, "hit_rate", hit_rate(c["cs_hits"], c["cs_lookups"]))
            out.add(nid, "cs_size", len(r.cs))
            out.add(nid, "pit_size", len(r.pit))
            out.add(nid, "pit_peak", r.pit.peak)
            out.add(nid, "pit_mean", r.pit.mean_occupancy(now))
            out.add(nid, "cpu_us", node.cpu_us)
            if c["interests"]:
                out.add(nid, "cpu_us_per_interest", node.cpu_us / c["interests"])
            for kind in ("interest", "data"):
                n = node.processing_us[kind + "_count"]
                if n:
                    out.add(nid, f"{kind}_processing_us_mean", node.processing_us[kind] / n)
            for face in sorted(r.face_counters):
                fc = r.face_counters[face]
                ent = f"{nid}#{face}"
                for key in sorted(fc):
                    out.add(ent, key, fc[key])
                out.add(ent, "hit_rate", hit_rate(fc["cs_hits"], fc["cs_lookups"]))
        elif isinstance(node, Host):
            c = node.counters
            if isinstance(node, Producer):
                out.add(nid, "served", c["served"])
            sent = c["sent"]
            if not sent and not c["sent_untracked"]:
                continue
            out.add(nid, "sent", sent)
            if c["sent_untracked"]:
                out.add(nid, "sent_untracked", c["sent_untracked"])
            out.add(nid, "satisfied", c["satisfied"])
            out.add(nid, "rejected", c["rejected"])
            out.add(nid, "timeout", c["timeout"])
            out.add(nid, "pending", node.pending_count())
            if sent:
                out.add(nid, "satisfaction_ratio", c["satisfied"] / sent)
            if node.rtts:
                out.add(nid, "rtt_mean_ms", statistics.fmean(node.rtts) / 1000)
                out.add(nid, "rtt_p50_ms", statistics.median(node.rtts) / 1000)
                out.add(nid, "rtt_min_ms", min(node.rtts) / 1000)
                out.add(nid, "rtt_max_ms", max(node.rtts) / 1000)
    for entity, metric, value in engine.extra_metrics:
        out.add(entity, metric, value)
    return out


def attack_results_csv(engine) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATTACK_COLUMNS)
    for attack_id, variant, phash, metric, value in engine.attack_results:
        w.writerow((engine.scenario_id, engine.seed, attack_id, variant, phash, metric, fmt(value)))
    return buf.getvalue()
