import numpy as np
import pytest

from flsim.data import generate_synthetic
from flsim.lora import LoraAdapter, LoraAdapterSet, init_adapters
from flsim.nn import ModelConfig, init_base_model

TINY = ModelConfig(vocab_size=259, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=24)


def randomize_b(adapters, seed, scale=0.3):
    """Adapters with non-zero B so every gradient path is live."""
    rng = np.random.default_rng(seed)
    return LoraAdapterSet(
        {
            n: LoraAdapter(n, a.A.copy(), rng.normal(0, scale, a.B.shape).astype(a.B.dtype))
            for n, a in adapters.items()
        }
    )


@pytest.fixture
def tiny_model():
    return init_base_model(TINY, seed=3)


@pytest.fixture
def tiny_model64():
    return init_base_model(TINY, seed=3, dtype=np.float64)


@pytest.fixture
def tiny_adapters(tiny_model):
    return init_adapters(tiny_model, rank=2, seed=5)


@pytest.fixture(scope="session")
def synthetic800():
    return generate_synthetic(7, 800)


# --- acceptance verdicts -----------------------------------------------------

_VERDICTS: dict[int, tuple[str, str, float]] = {}
DETAILS: dict[int, list[str]] = {}


def note(number: int, text: str) -> None:
    """Detail line shown under the criterion's verdict."""
    print(f"criterion {number}: {text}")
    DETAILS.setdefault(number, []).append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        verdict = "PASS" if rep.passed else "FAIL"
        _VERDICTS[number] = (title, verdict, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, verdict, seconds = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}  ({seconds:.1f}s)")
        for text in DETAILS.get(number, []):
            terminalreporter.write_line(f"      {text}")
