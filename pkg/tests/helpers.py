"""Small topologies and process runners shared by the test modules."""
from ccnsim.engine import Engine
from ccnsim.nodes import Host, RouterNode
from ccnsim.router import RouterConfig


def chain(seed, edge_cfg=None, core_cfg=None, hosts=("c1",), edge_ms=2.0, core_ms=10.0,
          producer=None, trace=False):
    """hosts -- edge -- core -- producer. Returns the engine."""
    eng = Engine(seed, trace=trace)
    eng.add_node(RouterNode("edge", edge_cfg or RouterConfig()))
    eng.add_node(RouterNode("core", core_cfg or RouterConfig(cs_capacity=0)))
    for h in hosts:
        eng.add_node(h if isinstance(h, Host) else Host(h))
        eng.connect(h if isinstance(h, str) else h.id, "edge", edge_ms)
    eng.connect("edge", "core", core_ms)
    if producer is not None:
        eng.add_node(producer)
        eng.connect("core", producer.id, core_ms)
    eng.install_routes()
    return eng


def run_proc(eng, gen, until_us):
    proc = eng.spawn(gen)
    eng.run_until(until_us)
    return proc.result


def run_to_completion(eng, proc, step_us=5_000_000, limit_us=600_000_000):
    t = eng.now
    while proc.result is None and t < limit_us:
        t += step_us
        eng.run_until(t)
    return proc.result
