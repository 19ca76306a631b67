import numpy as np
import pytest
import torch

from app.core.errors import CheckpointError
from app.models.branch import ReplacePolicy
from app.models.corpus import UtteranceTriple
from app.models.losses import DivergenceKind
from app.models.training import Stage, TrainConfig
from app.services.diagnostics import run_grad_checks
from app.services.network import build_model
from app.services.synthdata import make_batch, translate_reference
from app.services.tab import (
    TabRngs,
    batch_modality_gap,
    forward_tab,
    init_from_pretrained,
    modality_gap_accuracy,
    modality_gap_counts,
)
from tests.integration.common import create_model_config, create_test_batch, create_test_corpus


@pytest.fixture(scope="module")
def corpus():
    return create_test_corpus(seed=6)


@pytest.fixture(scope="module")
def model(corpus):
    return build_model(Stage.ST, create_model_config(corpus.vocab), seed=2)


def _train(**overrides) -> TrainConfig:
    return TrainConfig(stage=Stage.ST, **overrides)


def test_without_replacement_or_dropout_the_branches_agree(corpus, model):
    batch = create_test_batch(corpus, [[0, 1, 2], [3, 4], [5, 5, 1, 2]])
    out = forward_tab(model, batch, _train(policy=ReplacePolicy(value=0.0)), TabRngs.for_step(1, 1, dropout=False))
    assert torch.equal(out.log_p, out.log_q)
    assert out.breakdown.cons == 0.0
    assert out.breakdown.ce_o == out.breakdown.ce_a
    assert all(pair.replaced == 0 for pair in out.branches)


def test_dropout_alone_separates_the_branches(corpus, model):
    batch = create_test_batch(corpus, [[0, 1, 2], [3, 4]])
    out = forward_tab(model, batch, _train(policy=ReplacePolicy(value=0.0)), TabRngs.for_step(1, 1))
    assert not torch.equal(out.log_p, out.log_q)
    assert out.breakdown.cons > 0.0


def test_same_step_streams_replay_the_same_loss(corpus, model):
    batch = create_test_batch(corpus, [[0, 1, 2], [3, 4]])
    config = _train(policy=ReplacePolicy(value=0.5))
    first = forward_tab(model, batch, config, TabRngs.for_step(3, 7))
    second = forward_tab(model, batch, config, TabRngs.for_step(3, 7))
    assert torch.equal(first.loss, second.loss)
    assert [p.replace_mask for p in first.branches] == [p.replace_mask for p in second.branches]


def test_total_matches_the_breakdown(corpus, model):
    batch = create_test_batch(corpus, [[1, 2], [3, 4, 0]])
    out = forward_tab(model, batch, _train(ctc_weight=0.3, alpha=2.0), TabRngs.for_step(1, 2))
    parts = out.breakdown
    assert float(out.loss) == pytest.approx(parts.ce_o + parts.ce_a + 0.3 * parts.ctc + 2.0 * parts.cons, rel=1e-5)
    assert 0.0 <= out.upsilon <= 1.0
    assert out.p_star == pytest.approx(0.5 * out.upsilon)


def test_smoothed_uncertainty_blends_in_the_previous_step(corpus, model):
    batch = create_test_batch(corpus, [[1, 2], [3, 4, 0]])
    raw = forward_tab(model, batch, _train(), TabRngs.for_step(1, 2, dropout=False))
    out = forward_tab(model, batch, _train(upsilon_smoothing=0.5), TabRngs.for_step(1, 2, dropout=False),
                      upsilon_prev=1.0)
    assert out.upsilon == pytest.approx(0.5 + 0.5 * raw.upsilon)
    assert out.p_star == pytest.approx(0.5 * out.upsilon)


def test_zero_consistency_weight_drops_the_divergence(corpus, model):
    batch = create_test_batch(corpus, [[1, 2], [3, 4, 0]])
    rngs = TabRngs.for_step(1, 2)
    out = forward_tab(model, batch, _train(alpha=0.0), rngs)
    parts = out.breakdown
    assert float(out.loss) == pytest.approx(parts.ce_o + parts.ce_a + 0.3 * parts.ctc, rel=1e-5)
    unweighted = forward_tab(model, batch, _train(divergence=DivergenceKind.NONE), TabRngs.for_step(1, 2))
    assert unweighted.breakdown.cons == 0.0


def test_single_branch_skips_the_second_pass(corpus, model):
    batch = create_test_batch(corpus, [[1, 2]])
    out = forward_tab(model, batch, _train(single_branch=True), TabRngs.for_step(1, 1))
    assert out.log_q is None
    assert out.breakdown.ce_a == 0.0
    assert out.breakdown.cons == 0.0


def test_too_short_utterances_are_skipped_and_counted(corpus, model):
    short = UtteranceTriple(
        uid="short",
        x=[0, 1, 2],
        y=translate_reference([0, 1, 2], corpus.vocab),
        speech=np.zeros((4, corpus.config.d_feat), dtype=np.float32),
    )
    batch = make_batch([short, corpus.st_dev[0]], corpus.vocab)
    out = forward_tab(model, batch, _train(), TabRngs.for_step(1, 1))
    assert out.skipped == 1
    assert out.kept == [1]
    assert torch.isfinite(out.loss)

    alone = forward_tab(model, make_batch([short], corpus.vocab), _train(), TabRngs.for_step(1, 1))
    assert alone.loss is None
    assert alone.skipped == 1


def test_modality_gap_reports_two_accuracies(corpus, model):
    speech_acc, text_acc = batch_modality_gap(model, make_batch(corpus.st_dev[:4], corpus.vocab))
    assert 0.0 <= speech_acc <= 1.0
    assert 0.0 <= text_acc <= 1.0


def test_split_accuracy_weights_batches_by_tokens(corpus, float64):
    model = build_model(Stage.ST, create_model_config(corpus.vocab), seed=5)
    items = corpus.st_dev
    counts = [modality_gap_counts(model, make_batch([item], corpus.vocab)) for item in items]
    tokens = sum(c[2] for c in counts)
    expected = (sum(c[0] for c in counts) / tokens, sum(c[1] for c in counts) / tokens)
    for batch_size in (1, 3, len(items)):
        speech_acc, text_acc = modality_gap_accuracy(model, items, corpus.vocab, batch_size)
        assert speech_acc == pytest.approx(expected[0])
        assert text_acc == pytest.approx(expected[1])


def test_initialization_copies_every_tensor(corpus):
    config = create_model_config(corpus.vocab)
    st = build_model(Stage.ST, config, 1)
    asr = build_model(Stage.ASR, config, 2)
    mt = build_model(Stage.MT, config, 3)
    report = init_from_pretrained(st, asr, mt)
    assert report.count == len(list(st.parameters()))
    state = st.state_dict()
    for source in (asr, mt):
        for name, tensor in source.state_dict().items():
            assert torch.equal(state[name], tensor)

    # the encoder computes exactly what the pre-trained one did
    batch = make_batch(corpus.st_dev[:2], corpus.vocab)
    assert torch.equal(st.ctc(st.encode_speech(batch)[0]), asr(batch)[0])


def test_initialization_rejects_mismatched_shapes(corpus):
    st = build_model(Stage.ST, create_model_config(corpus.vocab), 1)
    asr = build_model(Stage.ASR, create_model_config(corpus.vocab), 2)
    wide = build_model(Stage.MT, create_model_config(corpus.vocab, ffn_dim=64), 3)
    with pytest.raises(CheckpointError) as info:
        init_from_pretrained(st, asr, wide)
    assert info.value.tensor.startswith("shared.")


def test_fine_tuning_gradient_passes_finite_differences():
    report = run_grad_checks(["tab"], seed=0)["tab"]
    assert report.passed, report.max_rel_error
    assert torch.get_default_dtype() == torch.float32


def _pad_targets(batch, extra: int, pad_id: int):
    rows = batch.tgt_in.shape[0]
    filler = torch.full((rows, extra), pad_id, dtype=torch.long)
    batch.tgt_in = torch.cat([batch.tgt_in, filler], dim=1)
    batch.tgt_out = torch.cat([batch.tgt_out, filler], dim=1)
    batch.tgt_mask = torch.cat([batch.tgt_mask, torch.zeros(rows, extra, dtype=torch.bool)], dim=1)
    return batch


def test_losses_ignore_extra_padding(corpus, float64):
    model = build_model(Stage.ST, create_model_config(corpus.vocab), seed=4)
    items = corpus.st_dev[:3]
    config = _train(policy=ReplacePolicy(mode="dynamic", gamma=0.5))
    plain = forward_tab(model, make_batch(items, corpus.vocab), config, TabRngs.for_step(1, 1, dropout=False))
    padded_batch = _pad_targets(make_batch(items, corpus.vocab, pad_frames=13), 3, corpus.vocab.pad_id)
    padded = forward_tab(model, padded_batch, config, TabRngs.for_step(1, 1, dropout=False))
    assert float(padded.loss) == pytest.approx(float(plain.loss), abs=1e-6)
    for name in ("ce_o", "ce_a", "ctc", "cons"):
        assert getattr(padded.breakdown, name) == pytest.approx(getattr(plain.breakdown, name), abs=1e-6)
    assert padded.upsilon == pytest.approx(plain.upsilon, abs=1e-9)
