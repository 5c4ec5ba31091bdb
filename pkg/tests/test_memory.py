"""Clip window, temporal hierarchy and the memory read/propagate path."""
import numpy as np
import pytest

from refshadow import memory as M
from refshadow import tensor as T
from refshadow.errors import SequencingError, ShapeError
from refshadow.memory import (ClipRecord, HierarchicalMemory, MemoryWindow,
                              TripleEntity, build_hierarchy, push_clip)
from refshadow.tensor import Tensor

N_Q, D = 5, 16


def rng(seed=0):
    return np.random.default_rng(seed)


def entity(r, value=None):
    rep = np.full((N_Q, D), value) if value is not None \
        else r.normal(size=(N_Q, D))
    return TripleEntity(t_box=r.random((N_Q, 4)),
                        t_rep=Tensor(rep),
                        t_que=Tensor(r.normal(size=(N_Q, D))))


def clip(index, r, value=None, n_frames=3):
    return ClipRecord.from_entities(index,
                                    [entity(r, value) for _ in range(n_frames)])


# --- clip records -------------------------------------------------------------------

def test_clip_rep_is_mean_of_frame_reps():
    r = rng(1)
    ents = [entity(r) for _ in range(3)]
    rec = ClipRecord.from_entities(0, ents)
    expect = np.mean([e.t_rep.data for e in ents], axis=0)
    np.testing.assert_allclose(rec.clip_rep.data, expect, atol=1e-12)


def test_clip_rejects_bad_frame_counts():
    r = rng(2)
    with pytest.raises(ShapeError):
        ClipRecord.from_entities(0, [])
    with pytest.raises(ShapeError):
        ClipRecord.from_entities(0, [entity(r) for _ in range(4)])


def test_triple_entity_row_check():
    r = rng(3)
    with pytest.raises(ShapeError):
        TripleEntity(t_box=r.random((N_Q, 4)),
                     t_rep=Tensor(r.normal(size=(N_Q + 1, D))),
                     t_que=Tensor(r.normal(size=(N_Q, D))))


# --- sliding window -------------------------------------------------------------------

def test_window_keeps_five_most_recent_clips():
    r = rng(4)
    w = MemoryWindow()
    for i in range(7):
        push_clip(w, clip(i, r))
    assert [c.clip_index for c in w.clips] == [2, 3, 4, 5, 6]


def test_window_eviction_matches_list_slice_oracle():
    r = rng(5)
    w = MemoryWindow()
    pushed = []
    for i in range(23):
        push_clip(w, clip(i, r))
        pushed.append(i)
        assert [c.clip_index for c in w.clips] == pushed[-M.WINDOW_SIZE:]


def test_window_rejects_non_consecutive_clip():
    r = rng(6)
    w = MemoryWindow()
    push_clip(w, clip(0, r))
    with pytest.raises(SequencingError):
        push_clip(w, clip(2, r))
    with pytest.raises(SequencingError):
        push_clip(w, clip(0, r))


def test_first_clip_must_be_zero():
    with pytest.raises(SequencingError):
        push_clip(MemoryWindow(), clip(3, rng(7)))


# --- hierarchy -------------------------------------------------------------------------

def test_hierarchy_empty_window_raises():
    with pytest.raises(SequencingError):
        build_hierarchy(MemoryWindow())


def test_hierarchy_single_clip_replicates():
    r = rng(8)
    w = MemoryWindow()
    c = clip(0, r)
    push_clip(w, c)
    h = build_hierarchy(w)
    for t in (h.t1, h.t2, h.t3):
        np.testing.assert_allclose(t.data, c.clip_rep.data, atol=1e-12)


def test_hierarchy_full_window_scales():
    r = rng(9)
    w = MemoryWindow()
    # constant reps 0..4 so each scale's mean is obvious
    for i in range(5):
        push_clip(w, clip(i, r, value=float(i)))
    h = build_hierarchy(w)
    np.testing.assert_allclose(h.t1.data, 4.0, atol=1e-12)  # newest clip
    np.testing.assert_allclose(h.t2.data, 2.5, atol=1e-12)  # mean of clips 3,2
    np.testing.assert_allclose(h.t3.data, 0.5, atol=1e-12)  # mean of clips 1,0


def test_hierarchy_random_against_mean_oracle():
    r = rng(10)
    w = MemoryWindow()
    clips = [clip(i, r) for i in range(5)]
    for c in clips:
        push_clip(w, c)
    h = build_hierarchy(w)
    reps = [c.clip_rep.data for c in clips]
    np.testing.assert_allclose(h.t1.data, reps[4], atol=1e-12)
    np.testing.assert_allclose(h.t2.data, (reps[3] + reps[2]) / 2, atol=1e-12)
    np.testing.assert_allclose(h.t3.data, (reps[1] + reps[0]) / 2, atol=1e-12)


def test_hierarchy_partial_window_fills_with_oldest():
    r = rng(11)
    w = MemoryWindow()
    c0, c1, c2 = (clip(i, r) for i in range(3))
    for c in (c0, c1, c2):
        push_clip(w, c)
    h = build_hierarchy(w)
    np.testing.assert_allclose(h.t1.data, c2.clip_rep.data, atol=1e-12)
    np.testing.assert_allclose(h.t2.data,
                               (c1.clip_rep.data + c0.clip_rep.data) / 2,
                               atol=1e-12)
    # only the oldest clip remains for the coarsest scale
    np.testing.assert_allclose(h.t3.data, c0.clip_rep.data, atol=1e-12)


# --- embed / read / propagate -------------------------------------------------------

def test_memory_embed_matches_composition():
    r = rng(12)
    p = M.init_memory_params(D, 4, r)
    h = HierarchicalMemory(*(Tensor(r.normal(size=(N_Q, D)))
                             for _ in range(3)))
    got = M.memory_embed(h, p)
    fused = np.concatenate([p.fc1(h.t1).data, p.fc2(h.t2).data,
                            p.fc3(h.t3).data], axis=1)
    np.testing.assert_allclose(got.data, p.embed_mlp(Tensor(fused)).data,
                               atol=1e-12)


def test_memory_embed_scale_symmetry_with_shared_fcs():
    r = rng(13)
    p = M.init_memory_params(D, 4, r)
    p.fc2 = p.fc1
    p.fc3 = p.fc1
    t = Tensor(r.normal(size=(N_Q, D)))
    a = M.memory_embed(HierarchicalMemory(t, t, t), p)
    # with identical scales and shared projections, the embed cannot depend
    # on which scale slot a tensor sits in
    u = Tensor(t.data.copy())
    b = M.memory_embed(HierarchicalMemory(u, u, u), p)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)
    assert a.data.shape == (N_Q, D)


def test_memory_read_identical_keys_uniform_attention():
    r = rng(14)
    p = M.init_memory_params(D, 4, r)
    intra = entity(r)
    h_mem = Tensor(np.tile(r.normal(size=(1, D)), (N_Q, 1)))
    _, weights = M.memory_read(intra, h_mem, p, return_weights=True)
    for w in weights:
        np.testing.assert_allclose(w.data, 1.0 / N_Q, atol=1e-12)


def test_memory_read_matches_attention_module():
    r = rng(15)
    p = M.init_memory_params(D, 4, r)
    intra = entity(r)
    h_mem = Tensor(r.normal(size=(N_Q, D)))
    got = M.memory_read(intra, h_mem, p)
    expect = T.multi_head_attention(intra.t_que, h_mem, h_mem, p.heads,
                                    p.read_attention)
    np.testing.assert_allclose(got.data, expect.data, atol=1e-12)


def test_propagate_is_the_refresh_mlp():
    r = rng(16)
    p = M.init_memory_params(D, 4, r)
    e_m = Tensor(r.normal(size=(N_Q, D)))
    np.testing.assert_allclose(M.propagate(e_m, p).data,
                               p.prop_mlp(e_m).data, atol=1e-12)


def test_memory_path_grad_check():
    r = rng(17)
    p = M.init_memory_params(8, 2, r)
    intra = TripleEntity(t_box=r.random((2, 4)),
                         t_rep=Tensor(r.normal(size=(2, 8))),
                         t_que=Tensor(r.normal(size=(2, 8))))

    def f(t):
        h = HierarchicalMemory(t, t * 0.5, t * 0.25)
        h_mem = M.memory_embed(h, p)
        e_m = M.memory_read(intra, h_mem, p)
        return T.sum_(M.propagate(e_m, p))

    rep = T.grad_check(f, Tensor(r.normal(size=(2, 8))), tol=1e-4)
    assert rep.passed, rep.max_rel_err


# --- trace -----------------------------------------------------------------------------

def test_trace_record_is_json_serializable(tmp_path):
    import json
    r = rng(18)
    rec = M.trace_record(3, entity(r))
    assert rec["clip_index"] == 3
    M.dump_trace([rec, rec], tmp_path / "trace.jsonl")
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["clip_index"] == 3
