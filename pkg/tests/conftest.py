from __future__ import annotations

import pytest

from sparsectr.data import GeneratorSpec, generate
from sparsectr.model import ModelConfig, fill_from_data


def small_spec(**overrides) -> GeneratorSpec:
    base = dict(num_users=24, num_interests=4, items_per_interest=6, sessions_per_user=(3, 6),
                session_length=(1, 4), seq_len=12, num_candidates=3, exposures_per_user=3, seed=5)
    base.update(overrides)
    return GeneratorSpec(**base)


def small_config(samples, **overrides) -> ModelConfig:
    base = dict(d=8, num_heads=2, num_layers=2, num_chunks=3, transition_m=1, local_w=3)
    base.update(overrides)
    return fill_from_data(ModelConfig(**base), samples)


@pytest.fixture(scope="session")
def small_data():
    return generate(small_spec())


@pytest.fixture
def small_cfg(small_data):
    return small_config(small_data)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion, reflecting the real outcome
# --------------------------------------------------------------------------

_acceptance: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        _acceptance[props["criterion"]] = (report.outcome, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_acceptance):
        outcome, title, detail = _acceptance[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status} criterion {n}: {title}" + (f" [{detail}]" if detail else ""))
