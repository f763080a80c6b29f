import numpy as np
import pytest

from ssmsens.corpus import synth_stream
from ssmsens.model_zoo import ModelConfig, OutlierSpec, Subtype, build_model


def tiny_hybrid_config(num_blocks: int = 2, d_model: int = 8, seed: int = 0, **kw) -> ModelConfig:
    pattern = tuple(("SSM", "ATTN")[i % 2] for i in range(num_blocks))
    kw.setdefault("outlier_spec", OutlierSpec(0.125, 8.0, (Subtype.MAMBA_X_PROJ,)))
    return ModelConfig(num_blocks=num_blocks, block_pattern=pattern, d_model=d_model, d_state=4,
                       vocab_size=kw.pop("vocab_size", 32), seed=seed, **kw)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(tiny_hybrid_config())


@pytest.fixture(scope="session")
def tiny_stream():
    return synth_stream(7, 200, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    seen = []

    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        seen.append(name)
        return ok

    yield report
    if not seen:
        ACCEPTANCE_LINES.append(f"FAIL  {request.node.name}: raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
