"""YAML scenario files: schema, validation and engine construction."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import attacks
from .defenses import DetectorConfig, broadcast_blacklist
from .engine import Engine, EventKind, ms
from .nodes import (ConversationProducer, FixedName, Host, Periodic, Poisson, Producer, RouterNode,
                    Schedule, SequenceNames, UniformNames, UniqueNames, ZipfNames, workload)
from .overlay import AnonymizingRouter, fetch_via_circuit
from .router import LifetimeDist, RouterConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BUNDLED_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    """Schema or cross-reference problem in a scenario file."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LifetimeModel(_Strict):
    kind: Literal["fixed", "uniform", "exponential"] = "fixed"
    a_ms: float = Field(ge=0)
    b_ms: float = Field(0, ge=0)


class DetectorModel(_Strict):
    window_ms: float = Field(60_000, gt=0)
    periodic_min_repeats: int = Field(6, ge=3)
    periodic_cv_max: float = Field(0.2, gt=0)
    hit_rate_max: float = Field(0.8, ge=0, le=1)
    hit_rate_min_lookups: int = Field(20, ge=1)
    exclude_rate_max: float = Field(0.5, ge=0, le=1)
    exclude_min_count: int = Field(3, ge=1)
    pollution_min_faces: int = Field(2, ge=1)
    pollution_share_max: float = Field(0.25, ge=0, le=1)
    pollution_overlap_max: float = Field(0.2, ge=0, le=1)
    pollution_min_names: int = Field(50, ge=1)
    pollution_interval_ms: float = Field(1000, gt=0)
    enabled: list[Literal["periodic", "hit_rate", "exclude", "pollution"]] = \
        ["periodic", "hit_rate", "exclude", "pollution"]


class RouterModel(_Strict):
    """Every field optional so partial overrides can be layered."""

    cs_capacity: Optional[int] = Field(None, ge=0)
    cs_policy: Optional[Literal["LRU", "FIFO", "RANDOM", "POPULARITY"]] = None
    lifetime: Optional[LifetimeModel] = None
    popularity_k: Optional[int] = Field(None, ge=1)
    popularity_window_ms: Optional[float] = Field(None, gt=0)
    verify_signatures: Optional[bool] = None
    verify_cost_us: Optional[int] = Field(None, ge=0)
    honor_no_cache: Optional[bool] = None
    allow_non_invasive: Optional[bool] = None
    allow_exclude: Optional[bool] = None
    allow_chunk_requests: Optional[bool] = None
    hit_delay_min_ms: Optional[float] = Field(None, ge=0)
    hit_delay_jitter_ms: Optional[float] = Field(None, ge=0)
    per_domain_limit: Optional[float] = Field(None, gt=0)
    per_domain_burst: Optional[float] = Field(None, gt=0)
    pit_capacity: Optional[int] = Field(None, ge=1)
    pit_timeout_ms: Optional[float] = Field(None, gt=0)
    detectors: Optional[DetectorModel] = None
    response: Optional[Literal["ignore_for_caching", "drop_interests", "blacklist_producer"]] = None
    block_signers: Optional[list[str]] = None


class ProducerModel(_Strict):
    prefix: str
    service_delay_ms: float = Field(5.0, ge=0)
    service_jitter_ms: float = Field(0.0, ge=0)
    payload_size: int = Field(1024, ge=0)
    content_size: Optional[int] = Field(None, ge=0)
    chunk_size: int = Field(4096, gt=0)
    key_mode: Literal["longlived", "ephemeral"] = "longlived"
    no_cache: bool = False
    no_cache_prefixes: list[str] = []


class ConversationModel(_Strict):
    prefix: str
    messages: int = Field(ge=0)
    interval_ms: float = Field(100.0, gt=0)
    start_ms: float = Field(0.0, ge=0)
    size_bytes: int = Field(160, ge=0)
    size_jitter: int = Field(0, ge=0)
    opaque_names: bool = False
    listener: Optional[str] = None
    service_delay_ms: float = Field(1.0, ge=0)


class LinkModel(_Strict):
    a: str
    b: str
    delay_ms: float = Field(10.0, ge=0)
    loss: float = Field(0.0, ge=0, le=1)


class RouteModel(_Strict):
    router: str
    prefix: str
    via: str


class WorkloadModel(_Strict):
    host: str
    arrivals: Literal["poisson", "periodic", "schedule"] = "poisson"
    rate_per_s: Optional[float] = Field(None, gt=0)
    period_ms: Optional[float] = Field(None, gt=0)
    phase_ms: float = Field(0.0, ge=0)
    times_ms: Optional[list[float]] = None
    names: Literal["fixed", "zipf", "uniform", "unique", "sequence"] = "fixed"
    name: Optional[str] = None
    sequence: Optional[list[str]] = None
    prefix: Optional[str] = None
    catalog_size: Optional[int] = Field(None, ge=1)
    alpha: float = Field(0.8, ge=0)
    start_ms: float = Field(0.0, ge=0)
    stop_ms: Optional[float] = Field(None, ge=0)
    timeout_ms: float = Field(4000.0, gt=0)
    chunks: Optional[int] = Field(None, ge=1)
    no_cache_request: bool = False

    @model_validator(mode="after")
    def _complete(self):
        need = {"poisson": "rate_per_s", "periodic": "period_ms", "schedule": "times_ms"}[self.arrivals]
        if getattr(self, need) is None:
            raise ValueError(f"{self.arrivals} arrivals need {need}")
        if self.names == "fixed" and self.name is None:
            raise ValueError("fixed names need name")
        if self.names == "sequence" and not self.sequence:
            raise ValueError("sequence names need sequence")
        if self.names in ("zipf", "uniform", "unique") and self.prefix is None:
            raise ValueError(f"{self.names} names need prefix")
        if self.names in ("zipf", "uniform") and self.catalog_size is None:
            raise ValueError(f"{self.names} names need catalog_size")
        return self


ATTACK_PARAMS = {
    "Enumerate": {"prefix", "limit", "timeout_ms"},
    "TimingSequential": {"target", "probe_prefix", "calib_n", "t_c_ms", "epsilon_ms", "timeout_ms",
                         "estimate_repeats"},
    "TimingParallel": {"target", "probe_prefix", "calib_n", "t_c_ms", "epsilon_ms", "timeout_ms",
                       "estimate_repeats", "total_chunks"},
    "CloneConversation": {"prefix", "limit", "timeout_ms"},
    "IFASameName": {"prefix", "name", "rate_per_s", "poisson"},
    "IFADistinctNames": {"prefix", "rate_per_s", "poisson"},
    "IFANonexistent": {"prefix", "rate_per_s", "poisson"},
    "IFACollusion": {"prefix", "rate_per_s", "poisson"},
    "CachePollution": {"prefix", "catalog_size", "rate_per_s"},
    "ContentPoisoning": {"targets", "mode"},
}
REQUIRED_PARAMS = {
    "Enumerate": {"prefix"},
    "TimingSequential": {"target", "probe_prefix"},
    "TimingParallel": {"target", "probe_prefix", "total_chunks"},
    "CloneConversation": {"prefix"},
    "IFASameName": {"rate_per_s"},
    "IFADistinctNames": {"prefix", "rate_per_s"},
    "IFANonexistent": {"prefix", "rate_per_s"},
    "IFACollusion": {"prefix", "rate_per_s"},
    "CachePollution": {"prefix", "rate_per_s"},
    "ContentPoisoning": {"targets"},
}


class AttackModel(_Strict):
    id: str
    variant: Literal[attacks.VARIANTS]  # type: ignore[valid-type]
    nodes: list[str] = Field(min_length=1)
    params: dict[str, Any] = {}
    start_ms: float = Field(0.0, ge=0)
    stop_ms: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _params(self):
        allowed = ATTACK_PARAMS[self.variant]
        unknown = set(self.params) - allowed
        if unknown:
            raise ValueError(f"unknown params for {self.variant}: {sorted(unknown)}")
        missing = REQUIRED_PARAMS[self.variant] - set(self.params)
        if missing:
            raise ValueError(f"{self.variant} needs params {sorted(missing)}")
        return self


class BlacklistModel(_Strict):
    names: list[str]
    at_ms: float = Field(ge=0)
    origin: Optional[str] = None


class DefenseModel(RouterModel):
    routers: Optional[list[str]] = None
    blacklist: Optional[BlacklistModel] = None


class OverlayFetchModel(_Strict):
    host: str
    name: str
    at_ms: float = Field(0.0, ge=0)


class OverlayModel(_Strict):
    directory: list[str]
    fetches: list[OverlayFetchModel] = []


class ScenarioConfig(_Strict):
    schema_version: Literal[1]
    id: str
    description: str = ""
    seed: int = 0
    t_end_ms: float = Field(gt=0)
    router_defaults: RouterModel = RouterModel()
    routers: dict[str, Optional[RouterModel]]
    hosts: list[str] = []
    producers: dict[str, ProducerModel] = {}
    conversations: dict[str, ConversationModel] = {}
    anonymizers: list[str] = []
    links: list[LinkModel]
    auto_routes: bool = True
    routes: list[RouteModel] = []
    workloads: list[WorkloadModel] = []
    attacks: list[AttackModel] = []
    defenses: list[DefenseModel] = []
    overlay: Optional[OverlayModel] = None

    def node_kinds(self) -> dict:
        kinds = {}
        for kind, ids in (("router", self.routers), ("host", self.hosts), ("producer", self.producers),
                          ("conversation", self.conversations), ("anonymizer", self.anonymizers)):
            for nid in ids:
                if nid in kinds:
                    raise ScenarioError(f"node id {nid!r} declared twice")
                kinds[nid] = kind
        return kinds

    def check_references(self):
        kinds = self.node_kinds()

        def need(nid, where, allowed=None):
            if nid not in kinds:
                raise ScenarioError(f"{where}: unknown node {nid!r}")
            if allowed and kinds[nid] not in allowed:
                raise ScenarioError(f"{where}: node {nid!r} is a {kinds[nid]}, expected {'/'.join(allowed)}")

        for i, link in enumerate(self.links):
            need(link.a, f"links.{i}.a")
            need(link.b, f"links.{i}.b")
            if link.a == link.b:
                raise ScenarioError(f"links.{i}: self-loop on {link.a!r}")
        for i, r in enumerate(self.routes):
            need(r.router, f"routes.{i}.router", ("router",))
            need(r.via, f"routes.{i}.via")
        for i, w in enumerate(self.workloads):
            need(w.host, f"workloads.{i}.host", ("host",))
        for i, a in enumerate(self.attacks):
            allowed = ("router",) if a.variant == "ContentPoisoning" else ("host",)
            for j, nid in enumerate(a.nodes):
                need(nid, f"attacks.{i}.nodes.{j}", allowed)
        for i, d in enumerate(self.defenses):
            for j, nid in enumerate(d.routers or ()):
                need(nid, f"defenses.{i}.routers.{j}", ("router",))
            if d.blacklist and d.blacklist.origin:
                need(d.blacklist.origin, f"defenses.{i}.blacklist.origin", ("router",))
            for j, nid in enumerate(d.block_signers or ()):
                need(nid, f"defenses.{i}.block_signers.{j}", ("producer", "conversation"))
        for rid, rm in list(self.routers.items()) + [("router_defaults", self.router_defaults)]:
            for j, nid in enumerate((rm.block_signers if rm else None) or ()):
                need(nid, f"routers.{rid}.block_signers.{j}", ("producer", "conversation"))
        for cid, conv in self.conversations.items():
            if conv.listener is not None:
                need(conv.listener, f"conversations.{cid}.listener", ("host",))
        if self.overlay:
            if len(set(self.overlay.directory)) < 2:
                raise ScenarioError("overlay.directory: needs at least two anonymizers")
            for j, nid in enumerate(self.overlay.directory):
                need(nid, f"overlay.directory.{j}", ("anonymizer",))
            for j, f in enumerate(self.overlay.fetches):
                need(f.host, f"overlay.fetches.{j}.host", ("host",))
        attached = {n for link in self.links for n in (link.a, link.b)}
        for nid, kind in kinds.items():
            if kind != "router" and nid not in attached:
                raise ScenarioError(f"node {nid!r} has no link")
        return self


# -- loading ----------------------------------------------------------------

def _line_index(text: str) -> dict:
    """Map key paths in a YAML document to 1-based line numbers."""
    index = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return index

    def walk(node, path):
        index[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                index[path + (key,)] = k.start_mark.line + 1
                walk(v, path + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return index


def _locate(index: dict, loc) -> Optional[int]:
    path = tuple(int(p) if isinstance(p, str) and p.isdigit() else p for p in loc)
    while path:
        if path in index:
            return index[path]
        path = path[:-1]
    return index.get(())


def _format_errors(err: ValidationError, index: dict, source: str) -> str:
    lines = []
    for e in err.errors():
        loc = tuple(p for p in e["loc"] if not (isinstance(p, str) and p.startswith("function-")))
        where = ".".join(str(p) for p in loc) or "<root>"
        line = _locate(index, loc)
        at = f"{source}:{line}" if line else source
        lines.append(f"{at}: {where}: {e['msg']}")
    return "\n".join(lines)


def parse_scenario(data, source: str = "<scenario>", text: Optional[str] = None) -> ScenarioConfig:
    if data is None:
        raise ScenarioError(f"{source}: empty scenario file")
    if not isinstance(data, dict):
        raise ScenarioError(f"{source}: top level must be a mapping")
    index = _line_index(text) if text else {}
    try:
        cfg = ScenarioConfig.model_validate(data)
    except ValidationError as err:
        raise ScenarioError(_format_errors(err, index, source)) from None
    try:
        return cfg.check_references()
    except ScenarioError as err:
        raise ScenarioError(f"{source}: {err}") from None


def resolve_path(path) -> Path:
    """A scenario file path, or the name of a bundled scenario."""
    path = Path(path)
    if path.exists():
        return path
    candidate = BUNDLED_DIR / (path.name if path.suffix else f"{path.name}.yaml")
    if candidate.exists():
        return candidate
    raise FileNotFoundError(f"scenario not found: {path}")


def load_scenario(path) -> ScenarioConfig:
    path = resolve_path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ScenarioError(f"{path}: not valid YAML: {err}") from None
    return parse_scenario(data, str(path), text)


def bundled_scenarios() -> list:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.yaml"))


# -- overrides for sweeps ---------------------------------------------------

def apply_override(data: dict, path: str, value) -> dict:
    """Set a dotted path inside raw scenario data. The parent must exist."""
    parts = path.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        key = int(part) if isinstance(node, list) and part.isdigit() else part
        try:
            nxt = node[key]
        except (KeyError, IndexError, TypeError):
            if isinstance(node, dict) and key in ("router_defaults", "detectors", "params"):
                nxt = node[key] = {}
            else:
                raise ScenarioError(f"unknown parameter path {path!r}") from None
        if nxt is None and isinstance(node, dict):
            nxt = node[key] = {}
        node = nxt
    last = parts[-1]
    if isinstance(node, list):
        if not last.isdigit() or int(last) >= len(node):
            raise ScenarioError(f"unknown parameter path {path!r}")
        node[int(last)] = value
    elif isinstance(node, dict):
        node[last] = value
    else:
        raise ScenarioError(f"unknown parameter path {path!r}")
    return data


def with_overrides(data: dict, overrides: dict, source: str = "<sweep>") -> ScenarioConfig:
    data = copy.deepcopy(data)
    for path, value in overrides.items():
        apply_override(data, path, value)
    return parse_scenario(data, source)


# -- construction -----------------------------------------------------------

_US_FIELDS = {"popularity_window_ms": "popularity_window_us", "pit_timeout_ms": "pit_timeout_us",
              "hit_delay_min_ms": "hit_delay_min_us", "hit_delay_jitter_ms": "hit_delay_jitter_us"}


def _router_settings(*layers) -> dict:
    merged = {}
    for layer in layers:
        if layer is None:
            continue
        for key, value in layer.model_dump(exclude_unset=True).items():
            if key in ("routers", "blacklist"):
                continue
            if key == "detectors" and value is not None:
                value = getattr(layer, "detectors")
            if key == "lifetime" and value is not None:
                value = getattr(layer, "lifetime")
            merged[key] = value
    return merged


def _router_config(settings: dict, engine: Engine) -> RouterConfig:
    kw = {}
    for key, value in settings.items():
        if key in _US_FIELDS:
            kw[_US_FIELDS[key]] = None if value is None else ms(value)
        elif key == "lifetime":
            kw[key] = None if value is None else LifetimeDist(value.kind, ms(value.a_ms), ms(value.b_ms))
        elif key == "detectors":
            kw[key] = None if value is None else DetectorConfig(
                window_us=ms(value.window_ms), periodic_min_repeats=value.periodic_min_repeats,
                periodic_cv_max=value.periodic_cv_max, hit_rate_max=value.hit_rate_max,
                hit_rate_min_lookups=value.hit_rate_min_lookups, exclude_rate_max=value.exclude_rate_max,
                exclude_min_count=value.exclude_min_count, pollution_min_faces=value.pollution_min_faces,
                pollution_share_max=value.pollution_share_max,
                pollution_overlap_max=value.pollution_overlap_max,
                pollution_min_names=value.pollution_min_names,
                pollution_interval_us=ms(value.pollution_interval_ms), enabled=tuple(value.enabled))
        elif key == "block_signers":
            kw[key] = frozenset(value or ())
        else:
            kw[key] = value
    return RouterConfig(**kw)


@dataclass
class Runtime:
    """A built scenario: the engine plus handles needed to report results."""

    config: ScenarioConfig
    engine: Engine
    t_end_us: int
    reporters: list = field(default_factory=list)
    finished: bool = False

    def run(self, until_us: Optional[int] = None):
        metrics = self.engine.run_until(self.t_end_us if until_us is None else until_us)
        return metrics

    def finish(self):
        if self.finished:
            return
        self.finished = True
        for report in self.reporters:
            report()


def build(config: ScenarioConfig, seed: Optional[int] = None, trace: bool = False) -> Runtime:
    seed = config.seed if seed is None else seed
    eng = Engine(seed, trace=trace, scenario_id=config.id)
    rt = Runtime(config, eng, ms(config.t_end_ms))

    defense_by_router = {rid: [] for rid in config.routers}
    for d in config.defenses:
        for rid in (d.routers or list(config.routers)):
            defense_by_router[rid].append(d)
    signers = {}
    for rid, rm in config.routers.items():
        settings = _router_settings(config.router_defaults, rm, *defense_by_router[rid])
        signers[rid] = settings.pop("block_signers", None) or ()
        eng.add_node(RouterNode(rid, _router_config(settings, eng)))
    for hid in config.hosts:
        eng.add_node(Host(hid))
    for pid, pm in config.producers.items():
        eng.add_node(Producer(pid, pm.prefix, service_delay_ms=pm.service_delay_ms,
                              service_jitter_ms=pm.service_jitter_ms, payload_size=pm.payload_size,
                              content_size=pm.content_size, chunk_size=pm.chunk_size, key_mode=pm.key_mode,
                              no_cache=pm.no_cache, no_cache_prefixes=pm.no_cache_prefixes))
    conv_plans = {}
    for cid, cm in config.conversations.items():
        rng = eng.rng.stream(f"conversation/{cid}")
        from .names import name as to_name

        prefix = to_name(cm.prefix)
        if cm.opaque_names:
            names = [prefix.append(rng.randbytes(8).hex()) for _ in range(cm.messages)]
        else:
            names = [prefix.append(str(i)) for i in range(1, cm.messages + 1)]
        times = [ms(cm.start_ms + i * cm.interval_ms) for i in range(cm.messages)]
        sizes = [max(0, cm.size_bytes + (rng.randint(-cm.size_jitter, cm.size_jitter) if cm.size_jitter else 0))
                 for _ in range(cm.messages)]
        eng.add_node(ConversationProducer(cid, prefix, names, times, sizes, service_delay_ms=cm.service_delay_ms))
        conv_plans[cid] = (names, times)
    for aid in config.anonymizers:
        eng.add_node(AnonymizingRouter(aid))
    for link in config.links:
        eng.connect(link.a, link.b, link.delay_ms, link.loss)

    # signer blocking names producers; routers need their key ids
    for rid, ids in signers.items():
        if ids:
            keys = {eng.nodes[p].key_id for p in ids}
            eng.nodes[rid].router.config.block_signers = frozenset(keys)

    if config.auto_routes:
        eng.install_routes()
    for r in config.routes:
        eng.add_route(r.router, r.prefix, r.via)

    for i, w in enumerate(config.workloads):
        _spawn_workload(eng, w, i)
    for cid, cm in config.conversations.items():
        if cm.listener is not None:
            names, times = conv_plans[cid]
            host = eng.nodes[cm.listener]
            gen = workload(host, Schedule([t / 1000 for t in times]), SequenceNames(names), 0, None,
                           rng=eng.rng.stream(f"workload/{host.id}/{cid}"))
            eng.spawn(gen, kind=EventKind.WORKLOAD_TICK, node=host.id, name=f"listen-{cid}")
    for a in config.attacks:
        _launch_attack(rt, a)
    for d in config.defenses:
        if d.blacklist is not None:
            bl = d.blacklist
            eng.call_at(ms(bl.at_ms), lambda bl=bl: broadcast_blacklist(eng, bl.names, bl.origin))
    if config.overlay is not None:
        _launch_overlay(rt, config.overlay)
    return rt


def _spawn_workload(eng: Engine, w: WorkloadModel, index: int):
    host = eng.nodes[w.host]
    if w.arrivals == "poisson":
        arrivals = Poisson(w.rate_per_s)
    elif w.arrivals == "periodic":
        arrivals = Periodic(w.period_ms, w.phase_ms)
    else:
        arrivals = Schedule(w.times_ms)
    if w.names == "fixed":
        names = FixedName(w.name)
    elif w.names == "zipf":
        names = ZipfNames(w.prefix, w.catalog_size, w.alpha)
    elif w.names == "uniform":
        names = UniformNames(w.prefix, w.catalog_size)
    elif w.names == "unique":
        names = UniqueNames(w.prefix, tag=f"{w.host}-{index}-")
    else:
        names = SequenceNames(w.sequence)
    gen = workload(host, arrivals, names, ms(w.start_ms), None if w.stop_ms is None else ms(w.stop_ms),
                   ms(w.timeout_ms), w.chunks, w.no_cache_request,
                   rng=eng.rng.stream(f"workload/{host.id}/{index}"))
    eng.spawn(gen, kind=EventKind.WORKLOAD_TICK, node=host.id, name=f"workload-{index}")


def _launch_attack(rt: Runtime, a: AttackModel):
    eng = rt.engine
    p = a.params
    phash = attacks.param_hash({"variant": a.variant, "nodes": a.nodes, "params": p,
                                "start_ms": a.start_ms, "stop_ms": a.stop_ms})
    start = ms(a.start_ms)
    stop = ms(a.stop_ms) if a.stop_ms is not None else rt.t_end_us
    rows = eng.attack_results

    def emit(metric, value):
        rows.append((a.id, a.variant, phash, metric, value))

    if a.variant in attacks.IFA_VARIANTS:
        bots = [eng.nodes[n] for n in a.nodes]
        prefix = p.get("prefix", "/flood")
        attacks.ifa_flood(bots, a.variant, p["rate_per_s"], prefix, start, stop,
                          name=p.get("name"), poisson=p.get("poisson", False))
        rt.reporters.append(lambda: emit("interests_sent", sum(b.counters["sent_untracked"] for b in bots)))
        return
    if a.variant == "CachePollution":
        bots = [eng.nodes[n] for n in a.nodes]
        attacks.pollute_cache(bots, p["prefix"], p.get("catalog_size"), p["rate_per_s"], start, stop)
        rt.reporters.append(lambda: emit("interests_sent", sum(b.counters["sent_untracked"] for b in bots)))
        return
    if a.variant == "ContentPoisoning":
        specs = [attacks.poison_content(eng.nodes[n], p["targets"], p.get("mode", "forge")) for n in a.nodes]
        rt.reporters.append(lambda: emit("substituted", sum(s.substituted for s in specs)))
        return

    host = eng.nodes[a.nodes[0]]
    timeout = ms(p.get("timeout_ms", 50 if a.variant in ("Enumerate", "CloneConversation") else 2000))
    if a.variant == "Enumerate":
        gen = attacks.enumerate_cache(host, p["prefix"], p.get("limit", 1000), timeout)
    elif a.variant == "CloneConversation":
        # leave room for the last outstanding fetch to resolve before the end
        follow = ms(1000)
        gen = attacks.clone_conversation(host, p["prefix"], max(start, stop - follow), p.get("limit", 1000),
                                         follow, enum_timeout_us=timeout)
    else:
        gen = _timing_attack(host, a, p, stop, timeout)
    proc = eng.spawn(gen, kind=EventKind.ATTACK_TICK, node=host.id, name=a.id, at=start)

    def report():
        res = proc.result
        emit("completed", proc.done)
        if res is None:
            return
        if a.variant == "Enumerate":
            emit("names_found", len(res.names))
            emit("queries", res.queries)
            emit("blocked", res.blocked)
        elif a.variant == "CloneConversation":
            emit("fetched", len(res.fetched))
            emit("enumerated", res.enumerated)
            emit("blocked", res.blocked)
            emit("bytes_observed", sum(size for _, _, size in res.fetched))
        else:
            for metric, value in res.items():
                emit(metric, value)

    rt.reporters.append(report)


def _timing_attack(host, a, p, stop, timeout):
    cal = yield from attacks.calibrate_rtt(host, f"{p['probe_prefix']}/known", p["probe_prefix"],
                                           p.get("calib_n", 10), timeout)
    if "t_c_ms" in p:
        t_c = ms(p["t_c_ms"])
        est = None
    else:
        est = yield from attacks.estimate_characteristic_time(host, p["probe_prefix"], cal.threshold,
                                                              repeats=p.get("estimate_repeats", 1),
                                                              timeout_us=timeout)
        t_c = int(est.mean)
    eps = ms(p.get("epsilon_ms", 10))
    out = {"calibration_reliable": cal.reliable, "threshold_ms": cal.threshold / 1000,
           "t_c_ms": t_c / 1000, "epsilon_ms": eps / 1000}
    if est is not None:
        out["t_c_cv"] = est.cv
        out["t_c_reliable"] = est.reliable
    if a.variant == "TimingSequential":
        state = attacks.TimingProbeState(p["target"], t_c, eps, cal.threshold, cal.margin)
        dets = yield from attacks.timing_probe_loop(host, state, stop, timeout)
        out["probes"] = len(state.probes)
    else:
        res = yield from attacks.parallel_cache_probing(host, p["target"], p["total_chunks"], t_c, eps,
                                                        cal.threshold, stop, cal.margin, timeout)
        dets = res.detections
        out["probes"] = sum(len(s.probes) for s in res.states)
        out["blocked"] = res.blocked
    out["detections"] = len(dets)
    return out


def _launch_overlay(rt: Runtime, ov: OverlayModel):
    eng = rt.engine
    procs = []
    for i, f in enumerate(ov.fetches):
        host = eng.nodes[f.host]
        gen = fetch_via_circuit(host, ov.directory, f.name, eng.rng.stream(f"overlay/{host.id}/{i}"))
        procs.append((f.host, eng.spawn(gen, kind=EventKind.WORKLOAD_TICK, node=host.id,
                                        name=f"overlay-{i}", at=ms(f.at_ms))))

    def report():
        by_host = {}
        for hid, proc in procs:
            by_host.setdefault(hid, []).append(proc.result)
        for hid, results in by_host.items():
            done = [r for r in results if r is not None]
            eng.extra_metrics.append((hid, "overlay_fetches", len(results)))
            eng.extra_metrics.append((hid, "overlay_ok", sum(1 for r in done if r.ok)))
            rtts = [r.total_us for r in done if r.ok]
            if rtts:
                eng.extra_metrics.append((hid, "overlay_total_ms_mean", sum(rtts) / len(rtts) / 1000))

    rt.reporters.append(report)


def run_scenario(config: Union[ScenarioConfig, str, Path], seed: Optional[int] = None,
                 until_ms: Optional[float] = None, trace: bool = False):
    """Build, run to the end time, and return (runtime, metrics)."""
    if not isinstance(config, ScenarioConfig):
        config = load_scenario(config)
    rt = build(config, seed, trace)
    rt.run(None if until_ms is None else ms(until_ms))
    rt.finish()
    metrics = rt.engine.collect()
    return rt, metrics
