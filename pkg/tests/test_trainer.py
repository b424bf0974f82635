from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_TRAIN
from qtuning import trainer as tr
from qtuning.backbone import TaskHead
from qtuning.errors import CapacityError, InvalidConfigError, InvalidDataError
from qtuning.taskstream import Split


def test_first_task_lifecycle(tiny_backbone, tiny_tasks):
    st = tr.init_state(tiny_backbone, TINY_TRAIN, "qtuning", 6)
    snap, summary = tr.train_task(st, tiny_tasks[0])
    assert summary["queue_rows_before"] == 0 and summary["queue_rows_after"] == 2
    assert summary["eta"] == 0.0 and not summary["mr_active"]
    assert summary["identity_start_gap"] <= 1e-12
    assert snap.queue_rows.shape == (2, 8)


def test_eviction_task_accounting(tiny_backbone, tiny_tasks):
    cfg = replace(TINY_TRAIN, q_size=2)
    rec = tr.run_stream(tiny_tasks[:4], cfg, tiny_backbone)
    s = rec.summaries[2]  # task index 3 = q_size + 1
    assert (s["queue_rows_before"], s["queue_rows_train"], s["queue_rows_after"]) == (4, 4, 4)
    assert s["evicted"] and s["eta"] == cfg.eta and s["mr_active"]
    assert all(x["queue_rows_after"] <= 4 for x in rec.summaries)
    assert all(x["frozen_queue_stable"] for x in rec.summaries)


def test_bwt_exactly_zero_and_snapshots_stable(tiny_backbone, tiny_tasks):
    rec = tr.run_stream(tiny_tasks, TINY_TRAIN, tiny_backbone)
    acc = rec.rmatrix.acc
    for j in range(6):
        assert np.all(acc[j:, j] == acc[j, j])
    assert rec.metrics["BWT"] == 0.0
    st = rec.state
    assert [tr.snapshot_eval(s, t.test) for s, t in zip(st.snapshots, tiny_tasks)] == list(np.diag(acc))


def test_determinism(tiny_backbone, tiny_tasks):
    a = tr.run_stream(tiny_tasks[:3], TINY_TRAIN, tiny_backbone)
    b = tr.run_stream(tiny_tasks[:3], TINY_TRAIN, tiny_backbone)
    assert a.rmatrix.acc.tobytes() == b.rmatrix.acc.tobytes()
    assert [r["l_total"] for r in a.logs] == [r["l_total"] for r in b.logs]


def test_backbone_untouched(tiny_backbone, tiny_tasks):
    before = tiny_backbone.fingerprint()
    tr.run_stream(tiny_tasks[:3], TINY_TRAIN, tiny_backbone)
    assert tiny_backbone.fingerprint() == before


def test_log_columns_and_eta_schedule(tiny_backbone, tiny_tasks):
    rec = tr.run_stream(tiny_tasks[:4], TINY_TRAIN, tiny_backbone)
    assert all(set(tr.LOG_COLUMNS) <= set(r) for r in rec.logs)
    by_task = {}
    for r in rec.logs:
        by_task.setdefault(r["task"], set()).add(r["eta"])
    assert by_task[1] == by_task[2] == {0.0}
    assert by_task[3] == by_task[4] == {TINY_TRAIN.eta}


@pytest.mark.parametrize("variant", ["kl", "jsd"])
def test_mr_variants_run(tiny_backbone, tiny_tasks, variant):
    rec = tr.run_stream(tiny_tasks[:3], replace(TINY_TRAIN, mr_variant=variant), tiny_backbone)
    assert any(r["l_mr"] != 0.0 for r in rec.logs if r["task"] == 3)


def test_method_lifecycles(tiny_backbone, tiny_tasks):
    tasks = tiny_tasks[:4]
    per = tr.run_stream(tasks, TINY_TRAIN, tiny_backbone, method="pertask_prompt")
    assert all(s["queue_rows_train"] == 2 for s in per.summaries)
    shared = tr.run_stream(tasks, TINY_TRAIN, tiny_backbone, method="shared_prompt_only")
    assert all(s["queue_rows_train"] == 0 for s in shared.summaries)
    prog = tr.run_progprompt_baseline(tasks, TINY_TRAIN, tiny_backbone)
    assert [s["queue_rows_after"] for s in prog.summaries] == [2, 4, 6, 8]
    with pytest.raises(InvalidConfigError):
        tr.Lifecycle.for_method("shared_prompt_only", replace(TINY_TRAIN, prefix_len=0))
    with pytest.raises(InvalidConfigError):
        tr.Lifecycle.for_method("nope", TINY_TRAIN)


def test_progprompt_hits_capacity_at_predicted_task(tiny_backbone, tiny_tasks):
    # max_seq_len 64 = prefix 2 + queue + CLS 1 + input 6 -> queue may hold 55 rows
    from qtuning.taskstream import StreamConfig, generate_stream

    tasks = generate_stream(StreamConfig(n_tasks=30, vocab_size=64, seq_len=6, support=8, k_shot=2, k_val=1, k_test=2))
    cfg = replace(TINY_TRAIN, epochs=1, prompt_len=5)
    # task i trains with 5*i queue rows; 5*i > 55 first at i = 12
    with pytest.raises(CapacityError, match="queue=60"):
        tr.run_progprompt_baseline(tasks, cfg, tiny_backbone)


def test_fwt_probe_pertask_is_zero(tiny_backbone, tiny_tasks):
    cfg = replace(TINY_TRAIN, measure_fwt=True)
    rec = tr.run_stream(tiny_tasks[:3], cfg, tiny_backbone, method="pertask_prompt")
    assert rec.metrics["FWT"] == 0.0
    rec = tr.run_stream(tiny_tasks[:3], cfg, tiny_backbone)
    assert rec.metrics["FWT"] is not None


def test_empty_split_and_label_mismatch(tiny_backbone, tiny_tasks):
    st = tr.init_state(tiny_backbone, TINY_TRAIN, "qtuning", 1)
    t = tiny_tasks[0]
    bad = type(t)(t.task_id, t.class_dists, Split(t.train.x[:0], t.train.y[:0]), t.val, t.test)
    with pytest.raises(InvalidDataError):
        tr.train_task(st, bad)
    snap, _ = tr.train_task(st, t)
    with pytest.raises(InvalidDataError):
        tr.snapshot_eval(snap, Split(t.test.x, t.test.y + 5))


def test_snapshot_constant_head_majority(tiny_backbone, tiny_tasks):
    t = tiny_tasks[0]
    snap = tr.TaskInferenceSnapshot(0, 0, tiny_backbone, None, None, None, np.zeros((0, 8)), TaskHead(0, np.zeros((8, 2))))
    y = np.array([0, 0, 0, 1])
    acc = tr.snapshot_eval(snap, Split(t.test.x[:4], y))
    assert acc == 0.75
    with pytest.raises(ValueError):
        snap.head.alpha[0, 0] = 1.0


def test_snapshot_store_spills_to_disk(tiny_backbone, tiny_tasks, tmp_path):
    mem = tr.run_stream(tiny_tasks[:3], TINY_TRAIN, tiny_backbone)
    disk = tr.run_stream(tiny_tasks[:3], TINY_TRAIN, tiny_backbone, snapshot_dir=tmp_path / "snaps")
    assert mem.rmatrix.acc.tobytes() == disk.rmatrix.acc.tobytes()
    assert len(list((tmp_path / "snaps").iterdir())) == 3
    assert disk.state.snapshots._mem == []
