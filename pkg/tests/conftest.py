import numpy as np
import pytest
import torch

from trafficrft.policy_model import Checkpoint, ModelConfig, init_params
from trafficrft.scenario import KINDS, generate_synthetic
from trafficrft.tokenizer import build_vocab

torch.set_num_threads(1)

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_scenes():
    templates = ("straight", "curve", "four_way_intersection")
    return [generate_synthetic(templates[i % 3], 3 + i % 4, 40 + i) for i in range(12)]


@pytest.fixture(scope="session")
def small_vocab(small_scenes):
    return build_vocab(small_scenes, eps=0.5)


def tiny_config(vocab, **kw) -> ModelConfig:
    base = dict(d_model=16, n_blocks=1, n_heads=2, neighbor_k=4)
    base.update(kw)
    return ModelConfig(tuple(vocab.size(k) for k in KINDS), **base)


@pytest.fixture(scope="session")
def tiny_ck(small_vocab):
    cfg = tiny_config(small_vocab)
    return Checkpoint(cfg, init_params(cfg, 3), small_vocab.content_hash)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
