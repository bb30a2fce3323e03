"""Connectome documents, validation, plan compilation and projections."""
import json
from pathlib import Path

import numpy as np
import pytest

from cocoreco.connectome import (
    AreaSpec,
    ConnectomeError,
    ConnectomeSpec,
    EdgeSpec,
    compile_plan,
    default_connectome,
    default_document,
    load_connectome,
    parse_connectome,
    project,
    spatial_sizes,
    validate_connectome,
)
from cocoreco.tensor import ShapeError, Tensor

FIXTURES = Path(__file__).parent / "fixtures"


def _area(name, ch=4, k=3, s=1, **kw):
    return AreaSpec(name, ch, k, s, k // 2, **kw)


def _spec(areas, edges):
    return ConnectomeSpec(areas=tuple(areas), edges=tuple(EdgeSpec(*e) for e in edges))


def _chain_abc():
    return _spec(
        [_area("retina", 3, 1, is_input=True), _area("A"), _area("B"), _area("C")],
        [("retina", "A", "forward", 1.0), ("A", "B", "forward", 1.0), ("B", "C", "forward", 1.0), ("C", "B", "backward", 1.0)],
    )


class TestParse:
    def test_minimal_document(self):
        spec = load_connectome(FIXTURES / "minimal.json")
        assert len(spec.areas) == 2 and len(spec.edges) == 1
        assert spec.input_area.name == "retina"
        assert spec.area("A").padding == 1

    def test_missing_ec_weight_names_the_edge(self):
        with pytest.raises(ConnectomeError, match=r"retina->A.*ec_weight"):
            load_connectome(FIXTURES / "missing_ec.json")

    def test_shipped_default(self):
        spec = default_connectome()
        assert len(spec.areas) == 11 and len(spec.edges) == 16
        assert [e.key for e in spec.backward_edges] == ["PFC->IT:backward"]
        assert {a.name for a in spec.areas if a.cab_site} == {"V1", "IT", "PFC"}
        ec = {(e.src, e.dst): e.ec_weight for e in spec.edges}
        assert ec[("retina", "LGN")] == 0.9 and ec[("retina", "SC")] == 0.1
        assert validate_connectome(spec) == []

    def test_syntax_error_reports_line(self):
        with pytest.raises(ConnectomeError, match=r"line 3"):
            parse_connectome('{\n  "version": 1,\n  "areas": [,]\n}')

    def test_unknown_field_rejected(self):
        doc = json.loads(default_document())
        doc["areas"][1]["colour"] = "red"
        with pytest.raises(ConnectomeError, match="unknown fields"):
            parse_connectome(json.dumps(doc))

    def test_duplicate_area(self):
        doc = json.loads(default_document())
        doc["areas"].append(dict(doc["areas"][1]))
        with pytest.raises(ConnectomeError, match="duplicate area"):
            parse_connectome(json.dumps(doc))

    def test_round_trip_and_hash(self):
        spec = default_connectome()
        again = parse_connectome(spec.to_json())
        assert again == spec and again.spec_hash() == spec.spec_hash()
        assert spec.with_ec("V1->PFC:forward", 0.5).spec_hash() != spec.spec_hash()


class TestValidate:
    def test_unknown_area(self):
        spec = _spec([_area("retina", 3, 1, is_input=True), _area("A")], [("retina", "A", "forward", 1.0), ("A", "Z", "forward", 1.0)])
        assert any("unknown area 'Z'" in v for v in validate_connectome(spec))

    def test_cycle(self):
        problems = validate_connectome(load_connectome(FIXTURES / "cyclic.json"))
        assert any(p.startswith("forward subgraph not acyclic") and "A -> B -> A" in p for p in problems)

    def test_negative_ec(self):
        spec = _spec([_area("retina", 3, 1, is_input=True), _area("A")], [("retina", "A", "forward", -0.2)])
        assert any("non-negative" in v for v in validate_connectome(spec))

    def test_reports_every_violation(self):
        spec = _spec(
            [_area("retina", 3, 1, is_input=True), _area("A"), _area("B")],
            [("retina", "A", "forward", -1.0), ("A", "Q", "forward", 1.0), ("A", "A", "backward", 1.0)],
        )
        problems = validate_connectome(spec)
        assert len(problems) >= 4  # negative ec, unknown area, self loop, B unreachable

    def test_compile_refuses_invalid(self):
        with pytest.raises(ConnectomeError) as info:
            compile_plan(load_connectome(FIXTURES / "cyclic.json"))
        assert info.value.violations


class TestCompilePlan:
    def test_chain_with_feedback(self):
        plan = compile_plan(_chain_abc())
        assert plan.phase1 == ("retina", "A", "B", "C")
        assert [(e.src, dst) for e, dst in plan.refinements] == [("C", "B")]
        assert plan.phase2 == ("C",)

    def test_dag_has_no_refinement(self):
        spec = _chain_abc().without_edges(["C->B:backward"])
        plan = compile_plan(spec)
        assert plan.refinements == () and plan.phase2 == ()

    def test_alphabetical_tie_break(self):
        spec = _spec(
            [_area("retina", 3, 1, is_input=True), _area("Zeta"), _area("Alpha"), _area("Mid")],
            [("retina", "Zeta", "forward", 1.0), ("retina", "Alpha", "forward", 1.0), ("Alpha", "Mid", "forward", 1.0), ("Zeta", "Mid", "forward", 1.0)],
        )
        assert compile_plan(spec).phase1 == ("retina", "Alpha", "Zeta", "Mid")

    def test_pure_function_of_canonical_spec(self):
        spec = default_connectome()
        shuffled = ConnectomeSpec(areas=tuple(reversed(spec.areas)), edges=tuple(reversed(spec.edges)))
        assert compile_plan(spec).phase1 == compile_plan(shuffled).phase1
        assert shuffled.spec_hash() == spec.spec_hash()

    def test_default_plan(self):
        plan = compile_plan(default_connectome())
        assert plan.phase1 == ("retina", "LGN", "SC", "PULV", "V1", "V2", "V4", "V5MT", "PARIETAL", "IT", "PFC")
        assert plan.phase2 == ("PFC",)
        drivers = {n: e.src for n, e in plan.drivers.items()}
        assert drivers == {
            "LGN": "retina", "SC": "retina", "PULV": "SC", "V1": "LGN", "V2": "V1", "V4": "V2",
            "V5MT": "V2", "PARIETAL": "V5MT", "IT": "V4", "PFC": "IT",
        }
        skips = {n: sorted(e.src for e in es) for n, es in plan.skips.items() if es}
        assert skips == {"V4": ["PULV", "V1"], "V5MT": ["PULV"], "IT": ["PARIETAL"], "PFC": ["V1"]}

    def test_every_area_once_then_at_most_once_more(self):
        plan = compile_plan(default_connectome())
        assert len(set(plan.phase1)) == len(plan.phase1) == 11
        assert set(plan.phase2) <= set(plan.phase1) and len(set(plan.phase2)) == len(plan.phase2)

    def test_default_sizes_at_64(self):
        spec = default_connectome()
        sizes = spatial_sizes(spec, compile_plan(spec), (64, 64))
        assert sizes["V1"] == (32, 32) and sizes["IT"] == (8, 8) and sizes["PULV"] == (8, 8)


class TestProject:
    def test_zero_ec_gives_zero(self):
        rng = np.random.default_rng(0)
        out = project(Tensor(rng.random((1, 3, 4, 4))), (2, 2, 2), "forward", Tensor(rng.random((2, 3, 1, 1))), Tensor(rng.random(2)), 0.0)
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_constant_forward(self):
        w = np.zeros((2, 2, 1, 1))
        w[0, 0] = w[1, 1] = 1.0
        out = project(Tensor(np.full((2, 4, 4), 2.0)), (2, 2, 2), "forward", Tensor(w), Tensor(np.zeros(2)), 0.5)
        np.testing.assert_array_equal(out.data, np.ones((2, 2, 2)))

    def test_constant_backward(self):
        w = np.ones((1, 1, 1, 1))
        out = project(Tensor(np.full((1, 2, 2), 3.0)), (1, 5, 7), "backward", Tensor(w), None, 1.0)
        np.testing.assert_array_equal(out.data, np.full((1, 5, 7), 3.0))

    def test_non_integer_ratio(self):
        with pytest.raises(ShapeError, match="non-integer"):
            project(Tensor(np.ones((1, 5, 5))), (1, 2, 2), "forward", Tensor(np.ones((1, 1, 1, 1))), None, 1.0)
