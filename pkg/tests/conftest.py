import numpy as np
import pytest
import torch

from sidedit.model import ModelConfig, Seq2Seq

torch.set_num_threads(1)

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def tiny_config(vocab=12, d_model=8, d_ff=8, n_enc=1, n_dec=2, heads=2, activation="gated-silu",
                precision="fp64", seed=0, max_seq_len=16) -> ModelConfig:
    return ModelConfig(vocab, d_model, d_ff, n_enc, n_dec, heads, max_seq_len, activation, precision, seed)


def tiny_model(**kw) -> Seq2Seq:
    """A small random model with weights large enough that every path matters."""
    model = Seq2Seq(tiny_config(**kw))
    gen = torch.Generator().manual_seed(kw.get("seed", 0) + 17)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 0.5 + (p.dim() == 1))
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
