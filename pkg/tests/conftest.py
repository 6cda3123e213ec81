"""Shared fixtures and the acceptance-suite result banner.

Every test in test_acceptance.py is named ``test_criterion_NN_*``; the hook
below collects their outcomes and prints one PASS/FAIL line per criterion at
the end of the run so the suite's verdict is readable at a glance.
"""

import re

import pytest
import torch

from speechprune.data import SynthConfig, gen_dataset
from speechprune.model import ModelConfig, init_decoder
from speechprune.assembly import Projector

_CRITERION = re.compile(r"test_acceptance.*::test_criterion_(\d+)")
_results = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    if report.when == "call":
        _results[number] = report.passed and _results.get(number, True)
    elif report.failed:  # setup or teardown error
        _results[number] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(_results):
        verdict = "PASS" if _results[number] else "FAIL"
        terminalreporter.write_line(f"[acceptance] criterion {number}: {verdict}")


def make_model(num_layers=4, d_model=16, num_heads=2, d_mlp=None, vocab_size=11,
               max_seq_len=64, seed=3):
    cfg = ModelConfig(
        num_layers=num_layers, d_model=d_model, num_heads=num_heads,
        d_mlp=d_mlp if d_mlp is not None else 2 * d_model,
        vocab_size=vocab_size, max_seq_len=max_seq_len, seed=seed,
    )
    return init_decoder(cfg)


def make_projector(d_in=16, d_hidden=16, d_model=16, stack_k=1, seed=5):
    return Projector(d_in, d_hidden, d_model, stack_k=stack_k, seed=seed)


def random_inputs(t, d, seed=99):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(t, d, generator=g)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = SynthConfig(vocab_size=16, corpus_size=40, min_len=3, max_len=6,
                      min_frames=2, max_frames=3, d_e=8, noise_std=0.05,
                      task="transcribe", seed=7)
    return gen_dataset(cfg)


@pytest.fixture(scope="session")
def tiny_translate_dataset():
    cfg = SynthConfig(vocab_size=16, corpus_size=40, min_len=3, max_len=6,
                      min_frames=2, max_frames=3, d_e=8, noise_std=0.05,
                      task="translate", seed=7)
    return gen_dataset(cfg)
