import numpy as np
import pytest
import torch

import lotop


def test_generator_streams():
    for seed in range(5):
        a = lotop.random.generator(seed).random(8)
        b = lotop.random.generator(seed).random(8)
        assert (a == b).all()
    a = lotop.random.generator(3, 0).random(8)
    b = lotop.random.generator(3, 1).random(8)
    c = lotop.random.generator(4, 0).random(8)
    assert not (a == b).all()
    assert not (a == c).all()
    assert isinstance(lotop.random.generator(0).bit_generator, np.random.PCG64)


@pytest.mark.parametrize('seed', [-1, 2**63])
def test_generator_bad_seed(seed):
    with pytest.raises(ValueError):
        lotop.random.generator(seed)
    with pytest.raises(ValueError):
        lotop.random.generator(0, seed)


def test_tensors():
    x = lotop.random.standard_normal((3, 4), 7, 1)
    assert x.shape == (3, 4)
    assert x.dtype == torch.float64
    assert torch.equal(x, lotop.random.standard_normal((3, 4), 7, 1))

    u = lotop.random.uniform((1000,), 7)
    assert u.dtype == torch.float64
    assert 0.0 <= u.min() and u.max() < 1.0


def test_torch_generator():
    a = torch.rand(5, generator=lotop.random.torch_generator(1, 2))
    b = torch.rand(5, generator=lotop.random.torch_generator(1, 2))
    c = torch.rand(5, generator=lotop.random.torch_generator(1, 3))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
