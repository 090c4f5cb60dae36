import re

import pytest

from _acceptance_setup import build_or_load_pretrained


@pytest.fixture(scope="session")
def acceptance_assets():
    """Frozen small backbone + pretraining bigram table, disk-cached.

    First use trains for 20k steps (about ten minutes); later sessions load
    the checkpoint from .cache/.
    """
    backbone, table = build_or_load_pretrained()
    return backbone, table


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    outcomes = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            outcome = getattr(rep, "outcome", None)
            if outcome is None:  # e.g. deselected items
                continue
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)",
                          getattr(rep, "nodeid", ""))
            if m:
                outcomes.setdefault(int(m.group(1)), set()).add(outcome)
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(outcomes):
        got = outcomes[n]
        if got == {"passed"}:
            word = "pass"
        elif "skipped" in got and "failed" not in got:
            word = "skip"
        else:
            word = "fail"
        terminalreporter.write_line(f"criterion {n:02d}: {word}")
