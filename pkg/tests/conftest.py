import os
import sys
from io import StringIO
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from rich.console import Console  # noqa: E402

from vidadapt.synthdata import (  # noqa: E402
    ClipSpec,
    ObjectSpec,
    generate_clip,
    random_clip_spec,
)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("VIDADAPT_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set VIDADAPT_RUN_SLOW=1 to run acceptance experiments")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def fake_console(width: int = 120) -> Console:
    """Console that captures output to a string."""
    return Console(file=StringIO(), force_terminal=False, color_system=None, width=width)


def rendered(console: Console) -> str:
    return console.file.getvalue()


@pytest.fixture
def console() -> Console:
    return fake_console()


@pytest.fixture
def moving_square_spec() -> ClipSpec:
    """One class-1 square moving right by 2 px per frame on a 16x32 grid."""
    return ClipSpec(
        height=16,
        width=32,
        num_frames=4,
        num_classes=3,
        objects=(
            ObjectSpec(
                class_id=1,
                shape="rect",
                center=(8.0, 8.0),
                radii=(3.0, 3.0),
                velocity=(2.0, 0.0),
                color=(0.9, 0.2, 0.2),
            ),
        ),
        seed=3,
    )


@pytest.fixture
def tiny_clip():
    return generate_clip(
        random_clip_spec(11, height=16, width=24, num_frames=5, num_classes=3, num_objects=2)
    )


@pytest.fixture
def param_gradcheck():
    """Central-difference check of ``loss(module)`` against every module parameter.

    The module must already be float64.
    """
    import torch
    from torch.autograd import gradcheck
    from torch.func import functional_call

    def check(module, loss, eps=1e-4, rtol=1e-4, atol=1e-6):
        names = [name for name, _ in module.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())

        def objective(*values):
            return loss(lambda *args: functional_call(module, dict(zip(names, values)), args))

        return gradcheck(objective, params, eps=eps, atol=atol, rtol=rtol)

    return check
