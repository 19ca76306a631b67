import math

import pytest
from pydantic import ValidationError

from app.models.evaluation import SWEEP_PRESETS, ResultRow, ResultTable, SweepSpec
from app.models.training import MetricRow, RunRecord, Stage
from app.services.network import build_model
from app.services.training import BestCheckpoints, EarlyStopping
from tests.integration.common import create_model_config, create_test_corpus


def test_early_stopping_counts_epochs_without_strict_improvement():
    stopper = EarlyStopping(patience=2)
    assert stopper.update(1, 10.0)
    assert not stopper.update(2, 10.0)
    assert not stopper.should_stop
    assert not stopper.update(3, 9.0)
    assert stopper.should_stop
    assert (stopper.best_epoch, stopper.best_score) == (1, 10.0)


def test_improvement_resets_the_patience():
    stopper = EarlyStopping(patience=2)
    for epoch, score in enumerate([1.0, 0.5, 2.0, 1.5], start=1):
        stopper.update(epoch, score)
    assert stopper.best_epoch == 3
    assert stopper.bad_epochs == 1
    with pytest.raises(ValueError):
        EarlyStopping(0)


def test_best_checkpoints_keep_the_top_k_with_earlier_ties(tmp_path):
    model = build_model(Stage.MT, create_model_config(create_test_corpus().vocab), seed=1)
    ring = BestCheckpoints(tmp_path, k=2)
    for epoch, score in enumerate([1.0, 3.0, 3.0, 2.0, 0.5], start=1):
        ring.offer(model, epoch, score, seed=1)
    assert [path.name for path in ring.paths] == ["epoch_002", "epoch_003"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_002", "epoch_003"]


def _row(step: int, epoch: int, ratio: float) -> MetricRow:
    return MetricRow(step=step, epoch=epoch, stage=Stage.ST, loss_total=1.0, lr=1e-3, ratio_aux_orig=ratio)


def test_metric_steps_must_increase():
    with pytest.raises(ValidationError):
        RunRecord(stage=Stage.ST, rows=[_row(2, 1, 1.0), _row(2, 1, 1.0)])


def test_window_ratio_averages_the_first_and_last_epoch():
    record = RunRecord(
        stage=Stage.ST,
        rows=[_row(1, 1, 2.0), _row(2, 1, 4.0), _row(3, 2, 1.5), _row(4, 3, 1.0), _row(5, 3, 1.2)],
    )
    assert record.window_ratio("first") == pytest.approx(3.0)
    assert record.window_ratio("last") == pytest.approx(1.1)
    assert RunRecord(stage=Stage.ASR).window_ratio() is None


def test_table_preset_expands_to_one_cell_per_loss_term():
    cells = SWEEP_PRESETS["table2"].cells()
    assert len({c.cell_id for c in cells}) == 5
    assert len(cells) == 15
    none_cells = [c for c in cells if c.divergence == "none"]
    assert all(c.alpha == 0.0 for c in none_cells)


def test_baseline_preset_pairs_the_single_branch_run_with_tab():
    cells = SWEEP_PRESETS["table4"].cells()
    assert sorted({c.cell_id for c in cells}) == ["baseline", "bi_kl_a1_pdynamic"]
    assert all(c.single_branch == (c.cell_id == "baseline") for c in cells)
    fig4 = {c.cell_id for c in SWEEP_PRESETS["fig4"].cells()}
    assert {"bi_kl_a1_p0.2", "bi_kl_a5_p0.2"} <= fig4


def test_sweep_cells_are_unique_and_sorted():
    spec = SweepSpec(divergences=["none", "bi_kl"], alphas=[0.0, 1.0], p_stars=["0", "dynamic"], seeds=[2, 1],
                     include_baseline=True)
    cells = spec.cells()
    keys = [(c.cell_id, c.seed) for c in cells]
    assert len(keys) == len(set(keys))
    # none collapses its alpha axis: 2 p* values; bi_kl: 2 alphas x 2 p*; plus the baseline
    assert len({c.cell_id for c in cells}) == 2 + 4 + 1
    baseline = [c for c in cells if c.cell_id == "baseline"]
    assert all(c.single_branch for c in baseline)


def test_sweep_rejects_out_of_range_axes():
    with pytest.raises(ValidationError):
        SweepSpec(p_stars=["1.5"])
    with pytest.raises(ValidationError):
        SweepSpec(alphas=[-1.0])


def _result(cell: str, seed: int, test_bleu, note: str = "") -> ResultRow:
    return ResultRow(cell_id=cell, divergence="bi_kl", alpha=1.0, p_star="0.2", seed=seed,
                     dev_bleu=None if test_bleu is None else test_bleu + 1.0, test_bleu=test_bleu, epochs=3,
                     note=note)


def test_summary_aggregates_over_seeds_and_keeps_failed_cells():
    table = ResultTable(rows=[
        _result("b", 2, 20.0),
        _result("b", 1, 10.0),
        _result("a", 1, None, note="diverged"),
    ])
    frame = table.frame()
    assert list(frame["cell_id"]) == ["a", "b", "b"]
    assert list(frame["seed"]) == [1, 1, 2]
    summary = table.summary().set_index("cell_id")
    assert summary.loc["b", "test_bleu_mean"] == pytest.approx(15.0)
    assert summary.loc["b", "test_bleu_min"] == 10.0
    assert summary.loc["b", "avg_bleu_mean"] == pytest.approx(15.5)
    assert summary.loc["a", "seeds"] == 0
    assert math.isnan(summary.loc["a", "test_bleu_mean"])
