import pytest
import torch

import lotop
from lotop.lowrank import (
    approx_error,
    denoise_sequence,
    rank_k_approx,
    rank_sweep,
    select_rank,
    svd,
)


def _random_matrix(rows, cols, seed):
    return lotop.random.standard_normal((rows, cols), seed)


def _low_rank_matrix(rows, cols, rank, seed):
    left = lotop.random.standard_normal((rows, rank), seed, 0)
    right = lotop.random.standard_normal((rank, cols), seed, 1)
    return left @ right


def test_svd():
    factors = svd(torch.diag(torch.tensor([3.0, 1.0])))
    assert torch.allclose(factors.singular_values, torch.tensor([3.0, 1.0]).double())

    a = _random_matrix(8, 5, 0)
    factors = svd(a)
    assert factors.rank == 5
    error = torch.linalg.matrix_norm(factors.reconstruct() - a)
    assert error < 1e-10 * torch.linalg.matrix_norm(a)
    s = factors.singular_values
    assert (s[:-1] >= s[1:]).all() and (s >= 0).all()

    factors = svd(_random_matrix(20, 7, 1))
    assert factors.U.shape == (20, 7)
    assert factors.V.shape == (7, 7)
    assert torch.allclose(factors.U.T @ factors.U, torch.eye(7).double())


def test_svd_casorati_input():
    seq = lotop.ImageSequence(torch.rand(4, 3, 5, dtype=torch.float64))
    mat = lotop.sequence.to_casorati(seq)
    assert torch.equal(
        svd(mat).singular_values, svd(mat.data.clone()).singular_values
    )


def test_svd_errors():
    with pytest.raises(ValueError):
        svd(torch.zeros(2, 2, 2))
    with pytest.raises(ValueError):
        svd(torch.tensor([[1.0, float('nan')], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        svd(torch.eye(3), 'lanczos')
    with pytest.raises(ValueError):
        svd(torch.eye(3), 'randomized')
    with pytest.raises(ValueError):
        svd(torch.eye(3), 'randomized', k=4)


def test_randomized_svd():
    a = _low_rank_matrix(200, 30, 3, 0)
    exact = svd(a, 'exact')
    approx = svd(a, 'randomized', k=3, seed=5)
    assert approx.rank == 13
    assert torch.allclose(
        approx.singular_values[:3], exact.singular_values[:3], rtol=1e-8
    )
    assert torch.allclose(rank_k_approx(approx, 3), a, atol=1e-8)

    again = svd(a, 'randomized', k=3, seed=5)
    assert torch.equal(again.singular_values, approx.singular_values)
    assert torch.equal(again.U, approx.U)

    # auto is exact below 10**5 rows
    assert svd(a, 'auto', k=3).rank == 30


def test_rank_k_approx():
    factors = svd(torch.diag(torch.tensor([3.0, 1.0])))
    assert torch.allclose(
        rank_k_approx(factors, 1), torch.diag(torch.tensor([3.0, 0.0])).double()
    )
    a = _random_matrix(9, 6, 2)
    factors = svd(a)
    full = rank_k_approx(factors, 6)
    assert torch.linalg.matrix_norm(full - a) < 1e-10 * torch.linalg.matrix_norm(a)
    approx = rank_k_approx(factors, 4)
    assert approx.shape == a.shape
    residual = svd(approx).singular_values[4:]
    assert (residual < 1e-10 * factors.singular_values[0]).all()
    for k in [0, 7]:
        with pytest.raises(ValueError):
            rank_k_approx(factors, k)


def test_approx_error():
    factors = svd(torch.diag(torch.tensor([3.0, 1.0])))
    assert approx_error(factors, 1) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        approx_error(factors, 2)

    a = _random_matrix(20, 10, 3)
    factors = svd(a)
    expected = torch.linalg.matrix_norm(a - rank_k_approx(factors, 4), ord=2)
    assert approx_error(factors, 4) == pytest.approx(float(expected), abs=1e-10)


def test_best_rank_k_spectral_error():
    for seed in range(50):
        g = lotop.random.generator(seed, 99)
        rows, cols = int(g.integers(2, 65)), int(g.integers(2, 33))
        a = _random_matrix(rows, cols, seed)
        factors = svd(a)
        scale = float(factors.singular_values[0])
        for k in range(1, factors.rank):
            error = torch.linalg.matrix_norm(a - rank_k_approx(factors, k), ord=2)
            assert float(error) == pytest.approx(
                approx_error(factors, k), abs=1e-9 * scale
            )


def test_best_rank_k_beats_other_rank_k_matrices():
    a = _random_matrix(30, 12, 5)
    factors = svd(a)
    k = 3
    best = float(torch.linalg.matrix_norm(a - rank_k_approx(factors, k), ord=2))
    u, s, v = factors.U[:, :k], factors.singular_values[:k], factors.V[:, :k]
    for seed in range(100):
        # an arbitrary rank-k matrix and a rank-k neighbour of the optimum
        others = [
            _low_rank_matrix(30, 12, k, seed),
            (u + 0.01 * _random_matrix(30, k, seed)) * s @ v.T,
        ]
        for b in others:
            assert torch.linalg.matrix_rank(b) <= k
            error = float(torch.linalg.matrix_norm(a - b, ord=2))
            assert best <= error + 1e-12


def test_select_rank():
    s = torch.tensor([3.0, 1.0])
    assert select_rank(s, 0.9) == 1
    assert select_rank(s, 0.95) == 2
    assert select_rank(s, 1.0) == 2
    assert select_rank(torch.tensor([1.0, 0.0, 0.0]), 0.99) == 1
    for energy in [0.0, 1.5]:
        with pytest.raises(ValueError):
            select_rank(s, energy)


def test_denoise_sequence():
    m, n, frames = 16, 16, 10
    u = lotop.random.uniform((m * n,), 0) * 100 + 50
    v = lotop.random.uniform((frames,), 1) + 0.5
    clean = lotop.ImageSequence(torch.outer(u, v).T.reshape(frames, m, n))
    noisy = lotop.ImageSequence(
        clean.frames + 5 * lotop.random.standard_normal(clean.frames.shape, 2)
    )
    denoised = denoise_sequence(noisy, 1)
    assert denoised.dims == noisy.dims
    mse_before = ((noisy.frames - clean.frames) ** 2).mean()
    mse_after = ((denoised.frames - clean.frames) ** 2).mean()
    assert mse_after < mse_before

    full = denoise_sequence(noisy, frames)
    assert torch.allclose(full.frames, noisy.frames, rtol=0, atol=1e-10 * 255)

    constant = lotop.ImageSequence(torch.full((4, 3, 3), 7.0))
    assert torch.allclose(denoise_sequence(constant, 1).frames, constant.frames)

    twice = denoise_sequence(denoised, 1)
    assert torch.allclose(twice.frames, denoised.frames, atol=1e-9)

    for k in [0, frames + 1]:
        with pytest.raises(ValueError):
            denoise_sequence(noisy, k)


def test_rank_sweep():
    a = _random_matrix(12, 4, 0)
    points = rank_sweep(a, [1, 2, 4], 'exact')
    assert [p.k for p in points] == [1, 2, 4]
    s = svd(a).singular_values
    assert points[0].error == pytest.approx(float(s[1]))
    assert points[1].error == pytest.approx(float(s[2]))
    assert points[2].error == 0.0
    assert all(p.seconds >= 0.0 for p in points)
