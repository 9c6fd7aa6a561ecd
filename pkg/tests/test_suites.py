import math

from suites import Registry, Suite


def _suite():
    suite = Suite("demo")

    @suite.check("small", 1e-3)
    def small(ctx):
        return ctx["small"]

    @suite.check("not_applicable", 1.0)
    def not_applicable(ctx):
        return None

    @suite.check("broken", 1.0)
    def broken(ctx):
        return math.nan

    return suite


def test_values_below_threshold_pass():
    results = {r.name: r for r in _suite().run({"small": 1e-4})}
    assert results["demo.small"].passed
    assert results["demo.small"].value == 1e-4


def test_threshold_is_strict():
    results = {r.name: r for r in _suite().run({"small": 1e-3})}
    assert not results["demo.small"].passed


def test_skipped_checks_pass():
    results = {r.name: r for r in _suite().run({"small": 0.0})}
    skipped = results["demo.not_applicable"]
    assert skipped.skipped and skipped.passed and skipped.value is None
    assert skipped.as_dict()["skipped"] is True


def test_nan_fails():
    results = {r.name: r for r in _suite().run({"small": 0.0})}
    assert not results["demo.broken"].passed


def test_registry_runs_every_suite_in_order():
    other = Suite("other")
    other.check("zero", 1.0)(lambda ctx: 0.0)
    registry = Registry()
    registry.register_suite(_suite())
    registry.register_suite(other)
    names = [r.name for r in registry.run({"small": 0.0})]
    assert names == ["demo.small", "demo.not_applicable", "demo.broken", "other.zero"]
