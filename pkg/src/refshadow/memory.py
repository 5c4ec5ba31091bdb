"""Clip-level memory over a sliding window of five clips.

Per frame we keep a triple-entity record (boxes, representation, query).
Clips bundle up to three frames; a ring buffer holds the five most recent
completed clips. Three temporal scales are derived newest-first:
T1 = newest clip, T2 = mean of the next two, T3 = mean of the oldest two,
with missing clips filled by replicating the oldest available one.
"""
from __future__ import annotations

import json
import numpy as np
from dataclasses import dataclass, field

from . import tensor as T
from .errors import SequencingError, ShapeError
from .tensor import AttentionParams, LinearLayer, Mlp3, Tensor

CLIP_LEN = 3
WINDOW_SIZE = 5


@dataclass
class TripleEntity:
    t_box: np.ndarray  # N_q x 4, normalized cxcywh
    t_rep: Tensor      # N_q x d
    t_que: Tensor      # N_q x d

    def __post_init__(self):
        n_q = self.t_box.shape[0]
        if self.t_rep.data.shape[0] != n_q or self.t_que.data.shape[0] != n_q:
            raise ShapeError("triple-entity rows disagree")


@dataclass
class ClipRecord:
    clip_index: int
    frame_entities: list[TripleEntity]
    clip_rep: Tensor  # elementwise mean over frame t_reps

    @staticmethod
    def from_entities(clip_index: int, entities: list[TripleEntity]) -> "ClipRecord":
        if not 1 <= len(entities) <= CLIP_LEN:
            raise ShapeError(f"clip must hold 1..{CLIP_LEN} frames")
        acc = entities[0].t_rep
        for e in entities[1:]:
            acc = acc + e.t_rep
        return ClipRecord(clip_index, list(entities), acc * (1.0 / len(entities)))


@dataclass
class MemoryWindow:
    clips: list[ClipRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.clips)

    def newest_index(self) -> int | None:
        return self.clips[-1].clip_index if self.clips else None


def push_clip(w: MemoryWindow, c: ClipRecord) -> MemoryWindow:
    newest = w.newest_index()
    expected = 0 if newest is None else newest + 1
    if c.clip_index != expected:
        raise SequencingError(f"expected clip {expected}, got {c.clip_index}")
    w.clips.append(c)
    if len(w.clips) > WINDOW_SIZE:
        del w.clips[0]
    return w


@dataclass
class HierarchicalMemory:
    t1: Tensor
    t2: Tensor
    t3: Tensor


def build_hierarchy(w: MemoryWindow) -> HierarchicalMemory:
    """Three temporal scales from the window, newest-first.

    Raises on an empty window; the caller treats that as a cold start and
    skips the memory read entirely.
    """
    if not w.clips:
        raise SequencingError("empty window: cold start, skip the memory read")
    reps = [c.clip_rep for c in reversed(w.clips)]  # newest first
    while len(reps) < WINDOW_SIZE:
        reps.append(reps[-1])  # replicate the oldest available
    t1 = reps[0]
    t2 = (reps[1] + reps[2]) * 0.5
    t3 = (reps[3] + reps[4]) * 0.5
    return HierarchicalMemory(t1, t2, t3)


@dataclass
class MemoryParams:
    fc1: LinearLayer
    fc2: LinearLayer
    fc3: LinearLayer
    embed_mlp: Mlp3          # 3*d_fc -> d
    read_attention: AttentionParams
    prop_mlp: Mlp3           # d -> d
    heads: int = 4

    def layers(self):
        return (self.fc1, self.fc2, self.fc3,
                *self.embed_mlp.layers(),
                *self.read_attention.layers(),
                *self.prop_mlp.layers())


def init_memory_params(d: int, heads: int, rng: np.random.Generator) -> MemoryParams:
    params = MemoryParams(
        fc1=T.init_linear(d, d, rng),
        fc2=T.init_linear(d, d, rng),
        fc3=T.init_linear(d, d, rng),
        embed_mlp=T.init_mlp3(3 * d, d, d, rng),
        read_attention=T.init_attention(d, rng),
        prop_mlp=T.init_mlp3(d, d, d, rng),
        heads=heads,
    )
    # start the embed, read and propagation branches as no-ops: untrained
    # they only perturb the queries and the stored representations, so their
    # output layers open from zero under gradient flow
    for layer in (params.embed_mlp.l3, params.read_attention.wo,
                  params.prop_mlp.l3):
        layer.weight.data = np.zeros_like(layer.weight.data)
        layer.bias.data = np.zeros_like(layer.bias.data)
    return params


def memory_embed(h: HierarchicalMemory, p: MemoryParams) -> Tensor:
    """Fuse the three scales: MLP(Concat(FC(T1), FC(T2), FC(T3)))."""
    fused = T.concat([p.fc1(h.t1), p.fc2(h.t2), p.fc3(h.t3)], axis=1)
    return p.embed_mlp(fused)


def memory_read(intra: TripleEntity, h_mem: Tensor, p: MemoryParams,
                return_weights: bool = False):
    """Attention with Q from the previous frame's query, K=V=h_mem."""
    return T.multi_head_attention(intra.t_que, h_mem, h_mem, p.heads,
                                  p.read_attention, return_weights=return_weights)


def propagate(e_m: Tensor, p: MemoryParams) -> Tensor:
    """Refresh the tracking representation from the read output."""
    return p.prop_mlp(e_m)


def trace_record(clip_index: int, entity: TripleEntity) -> dict:
    """One JSON-serializable memory-trace record per frame."""
    return {
        "clip_index": clip_index,
        "boxes": np.asarray(entity.t_box, dtype=float).round(6).tolist(),
        "rep_norm": float(np.linalg.norm(entity.t_rep.data)),
        "que_norm": float(np.linalg.norm(entity.t_que.data)),
    }


def dump_trace(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
