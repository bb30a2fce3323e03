"""Compare every hand-written backward pass with central differences.

This runs a few instances per operation; ``cocoreco gradcheck`` runs the
full twenty.
"""
from cocoreco.gradcheck import TOL, run_suite

for r in run_suite(instances=3):
    print(f"{r.name:28s} {r.max_error:.2e} {'ok' if r.max_error < TOL else 'FAIL'}")
