import numpy as np
import pytest
import torch

import lotop
from lotop import _io
from lotop.exceptions import FormatError
from lotop.sequence import from_casorati, load_sequence, save_sequence, to_casorati


def _raw(dims, values):
    header = np.array((_io.SEQUENCE_MAGIC, *dims), dtype='<u4').tobytes()
    return header + np.asarray(values, dtype='<f4').tobytes()


def test_image_sequence():
    seq = lotop.ImageSequence(torch.arange(24, dtype=torch.float32).reshape(3, 2, 4))
    assert seq.frames.dtype == torch.float64
    assert (seq.frame_count, seq.height, seq.width) == (3, 2, 4)
    assert seq.dims == (2, 4, 3)
    assert len(seq) == 3
    assert seq[1].tolist() == [[8, 9, 10, 11], [12, 13, 14, 15]]
    pairs = seq.pairs()
    assert len(pairs) == 2
    assert torch.equal(pairs[1][0], seq[1]) and torch.equal(pairs[1][1], seq[2])


@pytest.mark.parametrize(
    'frames',
    [
        torch.zeros(1, 4, 4),
        torch.zeros(4, 4),
        torch.zeros(2, 0, 4),
        torch.full((2, 2, 2), float('nan')),
    ],
)
def test_image_sequence_validation(frames):
    with pytest.raises(ValueError):
        lotop.ImageSequence(frames)


def test_load_raw(tmp_path):
    path = tmp_path / 'in.seq'
    path.write_bytes(_raw((2, 2, 3), np.arange(12)))
    seq = load_sequence(path)
    assert (seq.frame_count, seq.height, seq.width) == (3, 2, 2)
    assert seq[1].tolist() == [[4.0, 5.0], [6.0, 7.0]]


def test_load_raw_errors(tmp_path):
    path = tmp_path / 'in.seq'
    path.write_bytes(_raw((2, 2, 3), np.arange(11)))
    with pytest.raises(FormatError, match='truncated payload'):
        load_sequence(path)

    path.write_bytes(_raw((2, 2, 3), np.arange(13)))
    with pytest.raises(FormatError, match='payload size mismatch'):
        load_sequence(path)

    path.write_bytes(_raw((2, 2, 3), np.arange(12))[:10])
    with pytest.raises(FormatError, match='truncated header'):
        load_sequence(path)

    data = bytearray(_raw((2, 2, 3), np.arange(12)))
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match='bad magic'):
        load_sequence(path)

    path.write_bytes(_raw((2, 2, 1), np.arange(4)))
    with pytest.raises(FormatError):
        load_sequence(path)

    with pytest.raises(FileNotFoundError):
        load_sequence(tmp_path / 'missing.seq')
    (tmp_path / 'frames.txt').write_text('')
    with pytest.raises(ValueError):
        load_sequence(tmp_path / 'frames.txt')


@pytest.mark.parametrize('suffix', ['.seq', '.npy'])
def test_save_load(tmp_path, suffix):
    frames = torch.arange(30, dtype=torch.float64).reshape(3, 2, 5) * 8.0
    seq = lotop.ImageSequence(frames)
    path = tmp_path / f'out{suffix}'
    save_sequence(seq, path)
    assert torch.equal(load_sequence(path).frames, frames)


def test_save_load_pgm_stack(tmp_path):
    frames = torch.arange(30, dtype=torch.float64).reshape(3, 2, 5) * 10.0 - 20.0
    path = tmp_path / 'frames'
    save_sequence(lotop.ImageSequence(frames), path, 'pgm-stack')
    assert sorted(p.name for p in path.iterdir()) == [
        'frame_0000.pgm',
        'frame_0001.pgm',
        'frame_0002.pgm',
    ]
    loaded = load_sequence(path)
    assert loaded.frames.shape == frames.shape
    assert torch.equal(loaded.frames, frames.clamp(0, 255))
    with pytest.raises(FormatError):
        load_sequence(path / 'frame_0000.pgm', 'pgm-stack')


def test_pgm_directory(tmp_path):
    for index, value in enumerate([10, 20]):
        header = b'P5\n# frame\n3 2\n255\n'
        (tmp_path / f'frame_{index:02d}.pgm').write_bytes(header + bytes([value] * 6))
    seq = load_sequence(tmp_path)
    assert seq.dims == (2, 3, 2)
    assert seq[0].unique().tolist() == [10.0]
    assert seq[1].unique().tolist() == [20.0]

    (tmp_path / 'frame_02.pgm').write_bytes(b'P5\n2 2\n255\n' + bytes(4))
    with pytest.raises(FormatError, match='inconsistent'):
        load_sequence(tmp_path)
    (tmp_path / 'frame_02.pgm').write_bytes(b'P6\n2 2\n255\n' + bytes(12))
    with pytest.raises(FormatError):
        load_sequence(tmp_path)


def test_pgm_directory_16_bit(tmp_path):
    samples = np.array([[0, 65535, 257]], dtype='>u2').tobytes()
    for index in range(2):
        (tmp_path / f'{index}.pgm').write_bytes(b'P5\n3 1\n65535\n' + samples)
    seq = load_sequence(tmp_path)
    assert seq[0].tolist() == [[0.0, 255.0, 1.0]]


def test_phantom_round_trip(tmp_path):
    cfg = lotop.synth.PhantomConfig((12, 10, 3), noise_sigma=0.1, seed=3)
    phantom = lotop.synth.generate_phantom(cfg)
    lotop.synth.write_phantom(phantom, tmp_path, cfg)
    loaded = load_sequence(tmp_path / 'sequence.seq')
    assert torch.equal(loaded.frames, phantom.sequence.frames)


def test_casorati():
    seq = lotop.ImageSequence(torch.rand(2, 2, 2, dtype=torch.float64))
    mat = to_casorati(seq)
    assert mat.data.shape == (4, 2)
    assert mat.source_dims == (2, 2, 2)
    frame = seq[0]
    expected = [frame[m, n].item() for m in range(2) for n in range(2)]
    assert mat.data[:, 0].tolist() == expected

    constant = to_casorati(lotop.ImageSequence(torch.ones(5, 3, 4)))
    assert constant.data.shape == (12, 5)
    assert torch.equal(constant.data, torch.ones(12, 5, dtype=torch.float64))
    assert torch.linalg.matrix_rank(constant.data) == 1


def test_from_casorati():
    seq = lotop.ImageSequence(torch.rand(4, 3, 5, dtype=torch.float64))
    assert torch.equal(from_casorati(to_casorati(seq)).frames, seq.frames)

    u = torch.rand(6, dtype=torch.float64)
    v = torch.rand(4, dtype=torch.float64)
    mat = lotop.CasoratiMatrix(torch.outer(u, v), (2, 3, 4))
    out = from_casorati(mat)
    for s in range(4):
        assert torch.allclose(out[s], u.reshape(2, 3) * v[s])

    with pytest.raises(ValueError):
        lotop.CasoratiMatrix(torch.zeros(6, 4), (2, 2, 4))
