import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps timing assertions stable inside the CI sandbox
    torch.set_num_threads(min(4, torch.get_num_threads()))
    yield
