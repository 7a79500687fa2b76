import pytest

from autov_bridge import toy


@pytest.fixture(scope="session")
def scorer():
    """Toy model trained far enough to prefer clean images over blanked ones."""
    model = toy.ToyLvlm(seed=0)
    final = toy.fit_color_task(model, steps=200, batch_size=16, seed=0)
    assert final < 0.5, f"color task failed to converge, final loss {final}"
    return model


@pytest.fixture(scope="session")
def raw():
    """Untrained toy model for shape and format checks."""
    return toy.ToyLvlm(seed=1)
