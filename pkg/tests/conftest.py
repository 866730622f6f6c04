import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trained import RECIPES, cached, problem, source_hash, trained  # noqa: E402

from epiflow.networks import nll_loss  # noqa: E402
from epiflow.training import TrainConfig, train_hybrid, train_online  # noqa: E402


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request, capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.stash[VERDICTS].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


@pytest.fixture(scope="session")
def model_cache(request):
    return Path(request.config.cache.mkdir("epiflow-trained"))


@pytest.fixture(scope="session")
def toy_ckpt(model_cache):
    return trained(model_cache, "toy")


@pytest.fixture(scope="session")
def toy_long_ckpt(model_cache):
    return trained(model_cache, "toy_long")


@pytest.fixture(scope="session")
def sir_ckpt(model_cache):
    return trained(model_cache, "sir")


@pytest.fixture(scope="session")
def sir_dummy_ckpt(model_cache):
    return trained(model_cache, "sir_dummies")


@pytest.fixture(scope="session")
def seir_ckpt(model_cache):
    return trained(model_cache, "seir")


@pytest.fixture(scope="session")
def hybrid_vs_online(model_cache):
    """Held-out SIR loss of hybrid (R=3, S=2000) and online training at 6000 simulations each."""
    path = model_cache / f"hybrid-vs-online-{source_hash()}.json"
    if path.exists():
        return tuple(json.loads(path.read_text()))
    sim, space = problem("sir")
    base = dict(batch_size=32, n_days=RECIPES["sir"]["train"]["n_days"], seed=3)
    online = train_online(TrainConfig(mode="online", iterations=6000 // 32, **base), space, sim)
    hybrid = train_hybrid(TrainConfig(mode="hybrid", rounds=3, per_round=2000, iterations=1000, **base),
                          space, sim)
    rng = np.random.default_rng(99)
    theta = space.sample(rng, 2000)
    x = sim.simulate_batch(theta, base["n_days"], rng).observed
    losses = []
    for ckpt in (online, hybrid):
        u = ckpt.parameter_space().to_unconstrained(theta)
        losses.append(float(nll_loss(ckpt.amortizer(), u, x).item()))
    path.write_text(json.dumps(losses))
    return tuple(losses)


__all__ = ["cached"]
