import numpy as np
import pytest

from cafe_micro.data import generate_pairs
from cafe_micro.model import ModelConfig, init_model
from cafe_micro.prompting import instruction_vocab


@pytest.fixture(scope="session")
def vocab():
    return instruction_vocab()


@pytest.fixture(scope="session")
def pairs():
    return generate_pairs(200, seed=13)


@pytest.fixture
def tiny_model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=8, n_layers=2, n_heads=2, max_seq=48, seed=0)
    return init_model(cfg, vocab)


@pytest.fixture
def small_model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=2, n_heads=2, seed=1)
    return init_model(cfg, vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary --------------------------------------------------------
@pytest.fixture(autouse=True)
def _tag_acceptance(request, record_property):
    marker = request.node.get_closest_marker("acceptance")
    if marker is not None:
        record_property("criterion", marker.args)


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            number, title = props["criterion"]
            failed = rep.outcome != "passed"
            if rep.when == "call" or failed:
                prev = rows.get(number)
                if prev is None or failed:
                    rows[number] = ("FAIL" if failed else "PASS", title, props.get("detail", ""))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows):
        status, title, detail = rows[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}" + (f" | {detail}" if detail else ""))
