import math

import pytest
import torch

from app.core.errors import InfeasibleAlignmentError, OracleTooLargeError, VocabError
from app.services.diagnostics import run_ctc_oracle_check
from app.utils import diffcore
from app.utils.ctc import (
    collapse_beta,
    ctc_loss,
    ctc_loss_batch,
    ctc_loss_oracle,
    ctc_project,
    greedy_path,
    greedy_transcript,
    min_frames,
)
from tests.integration.common import random_log_probs

# extended vocabulary {a=0, b=1, blank=2}
BLANK = 2


def _probs(rows):
    return torch.log(torch.tensor(rows, dtype=torch.float64))


def test_projection_with_zero_weights_is_uniform():
    h = torch.randn(5, 8)
    log_probs = ctc_project(h, torch.zeros(4, 8), torch.zeros(4))
    assert torch.allclose(log_probs, torch.full((5, 4), math.log(0.25)))
    assert torch.allclose(torch.logsumexp(log_probs, dim=-1), torch.zeros(5), atol=1e-6)


def test_certain_single_frame_costs_nothing():
    loss = ctc_loss(_probs([[1.0, 1e-300, 1e-300]]), [0], BLANK)
    assert float(loss) == pytest.approx(0.0, abs=1e-9)


def test_two_frames_uniform_over_label_and_blank():
    # paths (a,a), (a,_), (_,a) out of four equally likely ones
    log_probs = _probs([[0.5, 1e-300, 0.5], [0.5, 1e-300, 0.5]])
    assert float(ctc_loss(log_probs, [0], BLANK)) == pytest.approx(-math.log(0.75), abs=1e-9)


def test_oracle_single_path():
    assert ctc_loss_oracle(_probs([[0.5, 0.25, 0.25]]), [0], BLANK) == pytest.approx(-math.log(0.5))


def test_oracle_reports_unreachable_targets_as_infinite():
    assert ctc_loss_oracle(random_log_probs(2, 3), [0, 0], BLANK) == math.inf


def test_oracle_refuses_large_instances():
    with pytest.raises(OracleTooLargeError):
        ctc_loss_oracle(random_log_probs(12, 6), [0], 5)


def test_infeasible_and_malformed_targets_are_rejected():
    # a repeated label needs a blank between its copies
    assert min_frames([0, 0]) == 3
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(random_log_probs(2, 3), [0, 0], BLANK)
    with pytest.raises(VocabError):
        ctc_loss(random_log_probs(4, 3), [0, BLANK], BLANK)
    with pytest.raises(VocabError):
        ctc_loss(random_log_probs(4, 3), [7], BLANK)


def test_dynamic_programme_matches_enumeration(float64):
    report = run_ctc_oracle_check(cases=200, seed=5)
    assert len(report.cases) == 200
    assert report.passed, report.max_error


def test_gradient_is_negative_occupancy(float64):
    log_probs = random_log_probs(4, 3, seed=2).requires_grad_()
    ctc_loss(log_probs, [0, 1], BLANK).backward()
    # every frame is covered by exactly one label on each path
    assert torch.allclose(log_probs.grad.sum(dim=-1), -torch.ones(4))


def test_ctc_gradient_passes_finite_differences(float64):
    logits = torch.nn.Parameter(torch.randn(4, 3))
    params = diffcore.ParamSet({"logits": logits})
    report = diffcore.grad_check(lambda: ctc_loss(torch.log_softmax(logits, -1), [0, 1], BLANK), params)
    assert report.passed, report.max_rel_error


def test_batch_loss_ignores_padded_frames(float64):
    log_probs = random_log_probs(6, 3, seed=1)
    padded = torch.cat([log_probs, random_log_probs(3, 3, seed=9)]).unsqueeze(0)
    single = ctc_loss(log_probs, [0, 1], BLANK)
    batched = ctc_loss_batch(padded, torch.tensor([6]), [[0, 1]], BLANK)
    assert float(batched) == pytest.approx(float(single), abs=1e-12)


def test_greedy_path_groups_runs():
    # c=0, d=1, blank=2: labels [c, c, blank, d]
    path = greedy_path(_probs([[0.8, 0.1, 0.1], [0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.1, 0.8, 0.1]]))
    assert path.labels == [0, 0, 2, 1]
    assert [(r.label, r.start, r.end) for r in path.runs] == [(0, 0, 1), (2, 2, 2), (1, 3, 3)]


def test_greedy_path_breaks_ties_towards_smaller_ids():
    assert greedy_path(_probs([[0.4, 0.4, 0.2]])).labels == [0]


def test_collapse_merges_repeats_then_drops_blanks():
    assert collapse_beta([0, 0, BLANK, 1, 1], BLANK) == [0, 1]
    assert collapse_beta([BLANK, BLANK], BLANK) == []
    assert collapse_beta([0, BLANK, 0], BLANK) == [0, 0]


def test_greedy_transcript_honours_length():
    log_probs = _probs([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1]])
    assert greedy_transcript(log_probs, BLANK) == [0, 1, 0]
    assert greedy_transcript(log_probs, BLANK, length=2) == [0, 1]


def test_duplicating_a_peaked_frame_keeps_the_transcript():
    rows = [[0.9, 0.05, 0.05], [0.05, 0.05, 0.9], [0.05, 0.9, 0.05], [0.9, 0.05, 0.05]]
    expected = collapse_beta(greedy_path(_probs(rows)).labels, BLANK)
    for i in range(len(rows)):
        duplicated = rows[: i + 1] + rows[i:]
        assert collapse_beta(greedy_path(_probs(duplicated)).labels, BLANK) == expected


def test_appending_a_certain_blank_frame_leaves_the_loss_unchanged(float64):
    log_probs = random_log_probs(5, 3, seed=4)
    blank_frame = _probs([[1e-300, 1e-300, 1.0]])
    for x in ([0], [0, 1], [1, 1]):
        extended = torch.cat([log_probs, blank_frame])
        assert float(ctc_loss(extended, x, BLANK)) == pytest.approx(float(ctc_loss(log_probs, x, BLANK)), abs=1e-9)
