import inspect
import xml.etree.ElementTree as ET

import numpy as np
import pytest

import batchlab
import checks
from checks import CaseResult


def _ok():
    return True, "fine"


def _bad():
    return False, "off by one"


def _crash():
    raise ZeroDivisionError("division by zero")


@pytest.fixture
def fake_suites(monkeypatch):
    suites = {"alpha": [("ok", _ok), ("bad", _bad)], "beta": [("crash", _crash)]}
    monkeypatch.setattr(checks, "SUITES", suites)
    return suites


class TestRunner:
    def test_results_in_order(self, fake_suites):
        results = checks.run_suites(["beta", "alpha"])
        assert [(r.suite, r.name, r.passed) for r in results] == [
            ("beta", "crash", False), ("alpha", "ok", True), ("alpha", "bad", False)]
        assert results[0].detail == "ZeroDivisionError: division by zero"
        assert all(r.seconds >= 0 for r in results)

    def test_all_expands(self, fake_suites):
        assert [r.suite for r in checks.run_suites(["all"])] == ["alpha", "alpha", "beta"]

    def test_unknown_suite(self, fake_suites):
        with pytest.raises(KeyError, match="gamma"):
            checks.run_suites(["gamma"])

    def test_every_suite_is_registered(self):
        assert set(checks.SUITES) == {"ns", "reduction", "grad", "mup", "drift", "fit", "frontier", "ledger"}


def test_junit_report(tmp_path):
    results = [
        CaseResult("ns", "band", True, "inside", 0.5),
        CaseResult("ns", "polar", False, "gap 0.4", 0.25),
        CaseResult("fit", "powerlaw", True, "A=10", 0.0),
    ]
    path = checks.write_junit(tmp_path / "out" / "report.xml", results)
    root = ET.parse(path).getroot()
    suites = root.findall("testsuite")
    assert [s.get("name") for s in suites] == ["ns", "fit"]
    assert (suites[0].get("tests"), suites[0].get("failures")) == ("2", "1")
    failure = suites[0].findall("testcase")[1].find("failure")
    assert failure.get("message") == "gap 0.4"
    assert suites[1].find("testcase").get("classname") == "muonbench.fit"


class TestCheckFunctions:
    @pytest.mark.parametrize("check", [
        checks.check_reduction,
        checks.check_drift,
        checks.check_drift_consistency,
        checks.check_piecewise_roundtrip,
        checks.check_powerlaw,
        checks.check_level_costs,
        checks.check_ledger,
        checks.check_telescope_selection,
    ])
    def test_passes(self, check):
        passed, detail = check()
        assert passed, detail
        assert "(seed " in detail

    @pytest.mark.parametrize("suite,name", [(s, n) for s, cases in checks.SUITES.items() for n, _ in cases])
    def test_every_check_is_seeded(self, suite, name):
        fn = dict(checks.SUITES[suite])[name]
        assert isinstance(inspect.signature(fn).parameters["seed"].default, int)

    @pytest.mark.parametrize("check,kwargs", [
        (checks.check_ns_band, {"count": 3}),
        (checks.check_ns_symmetry, {"count": 3}),
        (checks.check_ns_twice, {"count": 3}),
        (checks.check_reduction, {"count": 3}),
        (checks.check_update_rms, {"count": 3}),
        (checks.check_frontier, {"sets": 5}),
        (checks.check_level_costs, {}),
    ])
    def test_detail_names_the_seed_it_ran_with(self, check, kwargs):
        _, detail = check(seed=21, **kwargs)
        assert detail.endswith("(seed 21)")

    def test_frontier_agrees_with_reference(self):
        passed, detail = checks.check_frontier(sets=200)
        assert passed, detail

    def test_reference_frontier_keeps_first_duplicate(self):
        points = [batchlab.TradeoffPoint(i, 1, 1.0, t, c, True)
                  for i, (c, t) in enumerate([(2.0, 5.0), (2.0, 5.0), (1.0, 9.0), (3.0, 5.0)])]
        assert [p.batch_size for p in checks.dominance_frontier(points)] == [2, 0]

    def test_conditioned_matrix(self, rng):
        g = checks.conditioned_matrix(rng, 6, 9, cond=10.0)
        s = np.linalg.svd(g, compute_uv=False)
        assert g.shape == (6, 9)
        assert s[0] == pytest.approx(10.0) and s[-1] == pytest.approx(1.0)
