import json
from pathlib import Path

import pytest

from fedlora_bench.config import from_dict
from fedlora_bench.lora_model import AdapterSet, BaseModel, LoraLayer

FIXTURES = Path(__file__).parent / "fixtures"


def random_base(rng, dims=(6, 5, 4, 3)) -> BaseModel:
    weights = tuple(rng.normal(0, 0.6, size=(a, b)) for a, b in zip(dims[:-1], dims[1:]))
    biases = tuple(rng.normal(0, 0.1, size=b) for b in dims[1:])
    return BaseModel(weights, biases, dims[-1])


def random_adapters(rng, base: BaseModel, rank=2, layers=None, alpha=None) -> AdapterSet:
    out = []
    for i, (fan_in, fan_out) in enumerate(base.layer_dims):
        if layers is not None and i not in layers:
            out.append(None)
            continue
        out.append(LoraLayer(rng.normal(0, 0.5, size=(rank, fan_in)),
                             rng.normal(0, 0.5, size=(fan_out, rank)),
                             float(alpha if alpha is not None else rank)))
    return AdapterSet(tuple(out))


def small_config(**sections):
    """A fast scenario: 20 clients, 4 per round, short rounds."""
    data = {
        "scenario": {"rounds": 5, "clients_per_round": 4},
        "clients": {"pool_size": 20},
        "task": {"samples_per_client": 32, "test_size": 200},
    }
    for k, v in sections.items():
        data[k] = {**data.get(k, {}), **v}
    return from_dict(data, env={})


@pytest.fixture(scope="session")
def published():
    return json.loads((FIXTURES / "published_tables.json").read_text())


# acceptance criteria register their outcome here; printed at the end of the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, text = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {text}")
