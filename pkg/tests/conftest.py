import numpy as np
import pytest

from msav.data import synth_dataset

# small feature shapes keep data-path tests fast; the model tests use full shapes
SMALL_SHAPES = {"spectral": (12, 4), "paudio": (1, 5), "pvisual": (3, 6)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 classes x 2 files x 4 segments with tiny feature shapes."""
    out = tmp_path_factory.mktemp("small_corpus")
    return synth_dataset(out, n_classes=3, files_per_class=2, segments_per_file=4, seed=7, shapes=SMALL_SHAPES,
                         anchor_scale=4.0)


def overfit_configs(epochs=200, seed=0):
    """Reduced model and optimizer settings for the synthetic overfit run.

    d_model 32 with one encoder and one decoder layer; peak lr 1e-3 with a
    50-step warmup, so that 200 epochs of 10 steps leave the 0.999 EMA teacher
    converged (the default 675-step warmup would use a third of the run).
    """
    from msav.model import ModelConfig
    from msav.training import TrainConfig

    model = ModelConfig(d_model=32, n_heads=2, ffn_dim=32, n_encoder_layers=1, n_decoder_layers=1)
    train = TrainConfig(epochs=epochs, batch_size=20, peak_lr=1e-3, warmup_steps=50, seed=seed)
    return model, train


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] AC{number:<2} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("AC")[1].split()[0])):
            terminalreporter.write_line(line)
