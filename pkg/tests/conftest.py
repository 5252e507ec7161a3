import numpy as np
import pytest

from fitrank.config import TrainConfig
from fitrank.data import make_batch, split_and_batch, synthetic_planted


def tiny_config(ex=None, **kw) -> TrainConfig:
    base = dict(widths=(16, 12), heads_user=2, heads_item=3, head_dim=4, n_queries=5,
                attention_widths=(6, 4), scorer_dim=4, embed_dim=3, batch_size=32, epochs=2)
    if ex is not None:
        base.update(n_users=ex.n_users, n_items=ex.n_items, n_categories=ex.n_categories)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_examples():
    ex, clusters = synthetic_planted(0, 40, 48, 8, seq_len=6, min_seq_len=2)
    return ex, clusters


@pytest.fixture(scope="session")
def tiny_split(tiny_examples):
    ex, _ = tiny_examples
    return split_and_batch(ex, batch=16, rng_seed=0)


@pytest.fixture
def tiny_batch(tiny_examples):
    ex, _ = tiny_examples
    return make_batch(ex, np.arange(8))


# acceptance criterion number -> (status, detail), printed after the run
ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool | None, detail: str) -> None:
        ACCEPTANCE[number] = ("NOT RUN" if ok is None else "PASS" if ok else "FAIL", detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status:<7}  {detail}")
