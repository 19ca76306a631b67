import math

import numpy as np
import pytest
import torch

from app.models.alignment import AlignmentPath
from app.models.branch import ReplacePolicy
from app.utils.branch import copy_replace, resolve_p_star, shrink
from app.utils.ctc import runs_of
from app.utils.diffcore import make_generator

BLANK = 9


def _path(labels):
    return AlignmentPath(labels=labels, runs=runs_of(labels))


def test_shrink_averages_repeated_frames():
    h = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]])
    o, labels = shrink(h, _path([0, 0, BLANK, 1]))
    assert labels == [0, BLANK, 1]
    assert torch.allclose(o, torch.tensor([[2.0, 3.0], [5.0, 6.0], [7.0, 8.0]]))


def test_shrink_of_distinct_labels_is_identity():
    h = torch.randn(4, 3)
    o, _ = shrink(h, _path([0, 1, 2, 3]))
    assert torch.allclose(o, h)


def test_shrink_conserves_frame_sums():
    h = torch.randn(7, 5)
    path = _path([0, 0, 0, BLANK, 1, 1, BLANK])
    o, labels = shrink(h, path)
    lengths = torch.tensor([run.length for run in path.runs], dtype=h.dtype)
    assert len(labels) == len(path.runs) == 4
    assert torch.allclose((o * lengths.unsqueeze(1)).sum(0), h.sum(0), atol=1e-6)


def test_shrink_passes_gradient_to_frames():
    h = torch.randn(3, 2, requires_grad=True)
    o, _ = shrink(h, _path([0, 0, 1]))
    o.sum().backward()
    # each frame carries 1/len(run) of its run's gradient
    assert torch.allclose(h.grad, torch.tensor([[0.5, 0.5], [0.5, 0.5], [1.0, 1.0]]))


@pytest.mark.parametrize("seed", range(5))
def test_shrink_keeps_one_row_per_run_on_random_paths(seed):
    rng = np.random.default_rng(seed)
    frames = [int(v) for v in rng.choice([0, 1, 2, BLANK], size=int(rng.integers(1, 30)))]
    h = torch.from_numpy(rng.normal(size=(len(frames), 4)))
    o, labels = shrink(h, _path(frames))
    changes = sum(1 for a, b in zip(frames, frames[1:]) if a != b)
    assert o.shape == (changes + 1, 4)
    assert all(a != b for a, b in zip(labels, labels[1:]))
    lengths = torch.tensor([run.length for run in _path(frames).runs], dtype=h.dtype)
    assert torch.allclose((o * lengths.unsqueeze(1)).sum(0), h.sum(0))


def test_zero_probability_copies_bitwise():
    o = torch.randn(5, 4)
    pair = copy_replace(o, [0, 1, BLANK, 2, 3], torch.randn(9, 4), 0.0, make_generator(1), BLANK)
    assert torch.equal(pair.a, o)
    assert pair.replace_mask == [False] * 5
    assert pair.replaced == 0


def test_certain_replacement_leaves_blanks_untouched():
    o = torch.randn(4, 3)
    table = torch.randn(9, 3)
    labels = [2, BLANK, 5, 0]
    pair = copy_replace(o, labels, table, 1.0, make_generator(1), BLANK)
    assert pair.replace_mask == [True, False, True, True]
    assert torch.equal(pair.a[1], o[1])
    for i in (0, 2, 3):
        assert torch.equal(pair.a[i], table[labels[i]])
    assert pair.replaceable == 3


def test_replaced_fraction_matches_probability():
    n = 10_000
    o = torch.zeros(n, 1)
    pair = copy_replace(o, [0] * n, torch.ones(9, 1), 0.5, make_generator(42), BLANK)
    # 99% binomial interval
    half_width = 2.576 * math.sqrt(0.25 / n)
    assert abs(pair.replaced / n - 0.5) < half_width


def test_replacement_rows_carry_gradient_to_the_table():
    table = torch.randn(9, 3, requires_grad=True)
    o = torch.randn(2, 3, requires_grad=True)
    pair = copy_replace(o, [4, BLANK], table, 1.0, make_generator(3), BLANK)
    pair.a.sum().backward()
    assert torch.equal(table.grad[4], torch.ones(3))
    assert torch.equal(o.grad[0], torch.zeros(3))
    assert torch.equal(o.grad[1], torch.ones(3))


def test_replacement_probability_must_be_a_probability():
    with pytest.raises(ValueError):
        copy_replace(torch.zeros(1, 1), [0], torch.zeros(9, 1), 1.5, make_generator(0), BLANK)


def test_resolve_dynamic_probability():
    policy = ReplacePolicy(mode="dynamic", gamma=0.5)
    assert resolve_p_star(policy, 0.6) == pytest.approx(0.3)
    assert resolve_p_star(policy, 0.0) == 0.0
    with pytest.raises(ValueError):
        resolve_p_star(policy, None)


def test_fixed_probability_ignores_uncertainty():
    policy = ReplacePolicy.from_setting("0.2")
    assert resolve_p_star(policy, 0.9) == 0.2
    assert policy.label == "0.2"
