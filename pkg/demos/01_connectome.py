"""Read the shipped connectome, reject a malformed one, and look at the schedule.

A connectome document lists brain areas (each one a convolution) and the
projections between them. Forward projections must form an acyclic graph;
backward projections feed one refinement pass.
"""
from cocoreco.connectome import (
    ConnectomeError,
    compile_plan,
    default_connectome,
    parse_connectome,
    spatial_sizes,
)

spec = default_connectome()
print(f"{len(spec.areas)} areas, {len(spec.edges)} projections, hash {spec.spec_hash()[:12]}")

plan = compile_plan(spec)
print("feedforward order:", " -> ".join(plan.phase1))
for edge, area in plan.refinements:
    print(f"feedback {edge.src} -> {edge.dst} refines {area}, then recomputes {', '.join(plan.phase2)}")
for area, edge in plan.drivers.items():
    extras = [e.src for e in plan.skips.get(area, ())]
    print(f"  {area:5s} driven by {edge.src:6s} skips from {extras}")

print("feature map sizes for a 64x64 image:")
for area, hw in spatial_sizes(spec, plan, (64, 64)).items():
    print(f"  {area:6s} {hw}")

cyclic = """{"version": 1,
 "areas": [{"name": "retina", "out_channels": 3, "kernel": 1, "stride": 1, "is_input": true},
           {"name": "A", "out_channels": 4, "kernel": 3, "stride": 1},
           {"name": "B", "out_channels": 4, "kernel": 3, "stride": 1}],
 "edges": [{"src": "retina", "dst": "A", "direction": "forward", "ec_weight": 1.0},
           {"src": "A", "dst": "B", "direction": "forward", "ec_weight": 1.0},
           {"src": "B", "dst": "A", "direction": "forward", "ec_weight": 1.0}]}"""
try:
    compile_plan(parse_connectome(cyclic))
except ConnectomeError as err:
    print("rejected:", err)
