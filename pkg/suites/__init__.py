# suites/__init__.py
"""Named invariant checks, grouped in suites and registered on the CLI."""

from dataclasses import dataclass
import logging
import math

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Check:
    name: str
    threshold: float
    func: object


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: object
    threshold: float
    passed: bool
    skipped: bool = False

    def as_dict(self):
        return {"name": self.name, "value": self.value, "threshold": self.threshold,
                "passed": self.passed, "skipped": self.skipped}


class Suite:
    """A group of checks; each returns a value that must stay below its threshold, or None when it does not apply."""

    def __init__(self, name):
        self.name = name
        self.checks = []

    def check(self, name, threshold):
        def decorator(f):
            self.checks.append(Check(f"{self.name}.{name}", threshold, f))
            return f
        return decorator

    def run(self, context):
        results = []
        for chk in self.checks:
            value = chk.func(context)
            if value is None:
                results.append(CheckResult(chk.name, None, chk.threshold, True, skipped=True))
                logger.info("%s skipped", chk.name)
                continue
            value = float(value)
            passed = math.isfinite(value) and value < chk.threshold
            results.append(CheckResult(chk.name, value, chk.threshold, passed))
            logger.info("%s = %.3e (< %.1e) %s", chk.name, value, chk.threshold, "ok" if passed else "FAILED")
        return results


class Registry:
    def __init__(self):
        self.suites = []

    def register_suite(self, suite):
        self.suites.append(suite)

    def run(self, context):
        return [r for suite in self.suites for r in suite.run(context)]
