import pytest

from stilts_lab import pipeline as P
from stilts_lab.datakit import SynthConfig, build_vocab, example_texts, gen_synthetic_pair_tasks
from stilts_lab.encoder import EncoderConfig, init_params

TINY_SYNTH = SynthConfig(n_inter_train=160, n_inter_dev=40, n_target_train=120, n_target_dev=40)
FAST = P.PhaseConfig(epochs=1, batch_size=16, base_lr=3e-3)


@pytest.fixture(scope="session")
def world():
    """A tiny related synthetic pair with a one-layer encoder: (inter, target, vocab, config, params)."""
    inter, target = gen_synthetic_pair_tasks(1, "related", TINY_SYNTH)
    vocab = build_vocab([example_texts(target.train), example_texts(inter.train)], 128)
    config = EncoderConfig(vocab_size=len(vocab), max_len=16, d_model=16, n_heads=2, n_layers=1,
                           dropout_rate=0.1)
    return inter, target, vocab, config, init_params(config, 0)


# acceptance criteria report: criterion number -> (passed, seconds, detail)
ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, seconds: float, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), seconds, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, seconds, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} ({seconds:.1f}s) {detail}")
