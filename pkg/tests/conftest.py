import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def perturb_(module: torch.nn.Module, seed: int = 0, scale: float = 0.05):
    """Give zero-initialised layers non-trivial weights so outputs depend on every path."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


@pytest.fixture(scope="session")
def tiny_system():
    """An untrained codec and a two-block backbone: cheap enough for interface tests."""
    from vtryon.adit import TryOnModel
    from vtryon.codec import LatentCodec
    from vtryon.config import ModelConfig
    from vtryon.pipeline import TryOnSystem
    model = TryOnModel(ModelConfig(d=32, heads=2, depth=2), seed=0)
    perturb_(model, seed=1)
    return TryOnSystem(LatentCodec(width=16, seed=0).eval(), model.eval())


@pytest.fixture(scope="session")
def tiny_model_dir(tiny_system, tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    tiny_system.save(d)
    return d


# --- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, str] = {}


def record_criterion(n: int, title: str, passed: bool, detail: str = "", failed=()):
    line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    if failed:
        line += f"  failed: {', '.join(failed)}"
    _CRITERIA[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
