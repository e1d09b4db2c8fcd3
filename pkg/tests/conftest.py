import pytest
import torch

from mtlface.config import ModelConfig
from mtlface.data import generate_toy_dataset
from mtlface.model import build_model

TINY = ModelConfig(
    preset="tiny",
    image_size=32,
    encoder_widths=(8, 8, 16, 16),
    attention_reduction=4,
    embed_dim=32,
    age_hidden=32,
    bank_filters=8,
    shared_filters=2,
    condition_channels=(8, 8, 8),
    style_dim=16,
    decoder_channels=(16, 8, 8),
    disc_channels=(8, 8, 16, 16),
    perceptual_channels=(8, 8, 16, 16),
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return build_model(TINY, n_classes=5, seed=0)


@pytest.fixture(scope="session")
def small_toy(tmp_path_factory):
    """6 identities x 14 images at 32x32."""
    out = tmp_path_factory.mktemp("toy_small")
    return generate_toy_dataset(out, n_identities=6, n_per_identity=14, image_size=32, seed=3)


@pytest.fixture
def tiny_batch():
    g = torch.Generator().manual_seed(0)
    ages = torch.tensor([3.0, 15.0, 27.0, 33.0, 48.0, 59.0, 70.0, 8.0])
    from mtlface.groups import age_to_group
    return {
        "images": torch.rand(8, 3, 32, 32, generator=g) * 2 - 1,
        "identity": torch.tensor([0, 1, 2, 3, 4, 0, 1, 2]),
        "age": ages,
        "group": torch.tensor([age_to_group(float(a)) for a in ages]),
    }


# acceptance results, one line per criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
