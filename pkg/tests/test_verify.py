import jsonschema
import numpy as np

from cliffmag.verify import (
    REPORT_SCHEMA,
    CheckResult,
    VerifyReport,
    _timed,
    check_algebra,
    check_damped_spectral_decay,
    check_gradients,
    check_lifting,
    run_verify,
    sorted_blade_product,
)


def test_sorting_oracle_by_hand():
    assert sorted_blade_product("1", "2") == (1, "12")
    assert sorted_blade_product("2", "1") == (-1, "12")
    assert sorted_blade_product("12", "12") == (-1, "")
    assert sorted_blade_product("13", "2") == (-1, "123")
    assert sorted_blade_product("", "3") == (1, "3")


def test_fast_checks_pass():
    for res in (check_algebra(n_triples=500), check_lifting(), check_gradients(), check_damped_spectral_decay("squared")):
        assert res.passed, res


def test_crashing_check_is_reported():
    def boom():
        raise RuntimeError("bad")

    res = _timed(boom)
    assert not res.passed and "RuntimeError" in res.detail


def test_report_schema_and_table():
    report = run_verify(rotor_modes=("linear",), include_training=False)
    doc = report.to_dict()
    jsonschema.validate(doc, REPORT_SCHEMA)
    names = [c["name"] for c in doc["checks"]]
    assert names[0] == "algebra_axioms" and "energy_monotone[linear]" in names
    assert "overall" in report.table()


def test_report_overall_flag():
    rep = VerifyReport([CheckResult("a", True, 1.0, 2.0), CheckResult("b", False, None, None)])
    assert not rep.passed
    assert np.isclose(rep.to_dict()["total_seconds"], 0.0)
    jsonschema.validate(rep.to_dict(), REPORT_SCHEMA)
