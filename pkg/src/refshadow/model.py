"""Toy query-based referring segmenter.

Pipeline per frame: color-prior weighting of the frame, patch-average
visual tokens plus learned text-token embeddings, a small transformer
encoder over the concatenated token stream, memory-refined queries through
a decoder, then box / score / mask heads. The mask head dots a per-query
embedding with each image token and bilinearly upsamples the patch grid
back to pixels.
"""
from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from functools import lru_cache

from . import memory as M
from . import msa as MSA
from . import tensor as T
from .data import tokenize
from .errors import ConfigError, ShapeError
from .tensor import AttentionParams, LinearLayer, Mlp3, Tensor

UNK_TOKEN = "<unk>"

MEMORY_MODES = ("off", "intra", "intra+single", "intra+hier")


class Vocabulary:
    """Dense token -> index map with a reserved unknown token at index 0."""

    def __init__(self, token_to_index: dict):
        if token_to_index.get(UNK_TOKEN) != 0:
            raise ConfigError("vocabulary must map the unknown token to 0")
        self.token_to_index = dict(token_to_index)

    @staticmethod
    def from_expressions(expressions) -> "Vocabulary":
        tokens = sorted({tok for e in expressions for tok in tokenize(e)})
        mapping = {UNK_TOKEN: 0}
        for tok in tokens:
            mapping.setdefault(tok, len(mapping))
        return Vocabulary(mapping)

    def __len__(self):
        return len(self.token_to_index)

    def encode(self, expression: str) -> np.ndarray:
        toks = tokenize(expression)
        if not toks:
            raise ConfigError("empty expression")
        return np.array([self.token_to_index.get(t, 0) for t in toks],
                        dtype=np.int64)


@dataclass
class ModelConfig:
    d: int = 32
    n_q: int = 5
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    patch: int = 8
    ff_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.n_q < 1:
            raise ConfigError("n_q must be >= 1")


@dataclass
class Block:
    attn: AttentionParams
    ff1: LinearLayer
    ff2: LinearLayer


@dataclass
class DecoderBlock:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ff1: LinearLayer
    ff2: LinearLayer


@dataclass
class ModelParams:
    img_proj: LinearLayer
    text_embed: Tensor           # vocab x d
    init_queries: Tensor         # n_q x d
    enc_blocks: list[Block]
    dec_blocks: list[DecoderBlock]
    box_head: Mlp3               # d -> 4
    score_head: LinearLayer      # d -> 1
    mask_embed: LinearLayer      # d -> d
    memory: M.MemoryParams

    def named_tensors(self):
        def lin(prefix, layer):
            yield f"{prefix}.weight", layer.weight
            yield f"{prefix}.bias", layer.bias

        yield from lin("img_proj", self.img_proj)
        yield "text_embed", self.text_embed
        yield "init_queries", self.init_queries
        for i, b in enumerate(self.enc_blocks):
            for name, l in zip(("wq", "wk", "wv", "wo"), b.attn.layers()):
                yield from lin(f"enc.{i}.attn.{name}", l)
            yield from lin(f"enc.{i}.ff1", b.ff1)
            yield from lin(f"enc.{i}.ff2", b.ff2)
        for i, b in enumerate(self.dec_blocks):
            for name, l in zip(("wq", "wk", "wv", "wo"), b.self_attn.layers()):
                yield from lin(f"dec.{i}.self.{name}", l)
            for name, l in zip(("wq", "wk", "wv", "wo"), b.cross_attn.layers()):
                yield from lin(f"dec.{i}.cross.{name}", l)
            yield from lin(f"dec.{i}.ff1", b.ff1)
            yield from lin(f"dec.{i}.ff2", b.ff2)
        for j, l in enumerate(self.box_head.layers()):
            yield from lin(f"box_head.{j}", l)
        yield from lin("score_head", self.score_head)
        yield from lin("mask_embed", self.mask_embed)
        mem = self.memory
        yield from lin("mem.fc1", mem.fc1)
        yield from lin("mem.fc2", mem.fc2)
        yield from lin("mem.fc3", mem.fc3)
        for j, l in enumerate(mem.embed_mlp.layers()):
            yield from lin(f"mem.embed.{j}", l)
        for name, l in zip(("wq", "wk", "wv", "wo"), mem.read_attention.layers()):
            yield from lin(f"mem.read.{name}", l)
        for j, l in enumerate(mem.prop_mlp.layers()):
            yield from lin(f"mem.prop.{j}", l)


def init_params(cfg: ModelConfig, vocab: Vocabulary) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    bound = 1.0 / np.sqrt(d)

    def block():
        return Block(T.init_attention(d, rng),
                     T.init_linear(d, cfg.ff_hidden, rng),
                     T.init_linear(cfg.ff_hidden, d, rng))

    def dec_block():
        return DecoderBlock(T.init_attention(d, rng), T.init_attention(d, rng),
                            T.init_linear(d, cfg.ff_hidden, rng),
                            T.init_linear(cfg.ff_hidden, d, rng))

    return ModelParams(
        img_proj=T.init_linear(3, d, rng),
        text_embed=Tensor(rng.uniform(-bound, bound, size=(len(vocab), d)),
                          requires_grad=True),
        init_queries=Tensor(rng.uniform(-bound, bound, size=(cfg.n_q, d)),
                            requires_grad=True),
        enc_blocks=[block() for _ in range(cfg.encoder_layers)],
        dec_blocks=[dec_block() for _ in range(cfg.decoder_layers)],
        box_head=T.init_mlp3(d, d, 4, rng),
        score_head=T.init_linear(d, 1, rng),
        mask_embed=T.init_linear(d, d, rng),
        memory=M.init_memory_params(d, cfg.heads, rng),
    )


@lru_cache(maxsize=8)
def _position_codes(n_tokens: int, d: int) -> np.ndarray:
    pos = np.arange(n_tokens)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    codes = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return codes


@lru_cache(maxsize=8)
def _upsample_1d(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation matrix for one axis (align_corners=False)."""
    scale = n_in / n_out
    u = np.zeros((n_out, n_in))
    for o in range(n_out):
        x = (o + 0.5) * scale - 0.5
        x = min(max(x, 0.0), n_in - 1.0)
        lo = int(np.floor(x))
        hi = min(lo + 1, n_in - 1)
        frac = x - lo
        u[o, lo] += 1.0 - frac
        u[o, hi] += frac
    return u


@lru_cache(maxsize=8)
def upsample_matrix(h_in: int, w_in: int, patch: int) -> np.ndarray:
    """(H*W) x (h_in*w_in) bilinear upsampling operator, H = h_in*patch."""
    return np.kron(_upsample_1d(h_in * patch, h_in), _upsample_1d(w_in * patch, w_in))


def patch_tokens(weighted: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patch channel means, scaled by 1/255; (H'*W', 3)."""
    h, w = weighted.shape[:2]
    if h < patch or w < patch:
        raise ShapeError(f"frame {h}x{w} smaller than patch {patch}")
    hp, wp = h // patch, w // patch
    crop = weighted[:hp * patch, :wp * patch, :].astype(np.float64)
    means = crop.reshape(hp, patch, wp, patch, 3).mean(axis=(1, 3))
    feats = means.reshape(hp * wp, 3) / 255.0
    # standardize per frame so weighted and raw inputs share a scale
    feats = feats - feats.mean(axis=0, keepdims=True)
    feats = feats / (feats.std(axis=0, keepdims=True) + 1e-6)
    return feats


def encode_frame(weighted: np.ndarray, cfg: ModelConfig,
                 params: ModelParams) -> Tensor:
    """(H'*W') x d visual tokens: projected patch means plus position codes."""
    feats = patch_tokens(weighted, cfg.patch)
    tokens = params.img_proj(T.constant(feats))
    return tokens + _position_codes(feats.shape[0], cfg.d)


def encode_text(expression: str, vocab: Vocabulary,
                params: ModelParams) -> Tensor:
    return encode_text_ids(vocab.encode(expression), params)


def encode_text_ids(ids: np.ndarray, params: ModelParams) -> Tensor:
    return T.take_rows(params.text_embed, ids)


def _ff(x: Tensor, ff1: LinearLayer, ff2: LinearLayer) -> Tensor:
    return ff2(T.relu(ff1(x)))


def fuse(f_img: Tensor, f_text: Tensor, cfg: ModelConfig,
         params: ModelParams) -> Tensor:
    """Concatenate tokens and run the encoder blocks (residual SA + FF)."""
    if f_img.data.shape[1] != f_text.data.shape[1]:
        raise ShapeError("image/text token widths differ")
    x = T.concat([f_img, f_text], axis=0)
    for b in params.enc_blocks:
        x = x + T.multi_head_attention(x, x, x, cfg.heads, b.attn)
        x = x + _ff(x, b.ff1, b.ff2)
    return x


def decode_queries(f_m: Tensor, queries: Tensor, cfg: ModelConfig,
                   params: ModelParams) -> Tensor:
    x = queries
    for b in params.dec_blocks:
        x = x + T.multi_head_attention(x, x, x, cfg.heads, b.self_attn)
        x = x + T.multi_head_attention(x, f_m, f_m, cfg.heads, b.cross_attn)
        x = x + _ff(x, b.ff1, b.ff2)
    return x


@dataclass
class FrameOutput:
    boxes: Tensor          # n_q x 4, sigmoid cxcywh
    mask_logits: Tensor    # (H*W) x n_q full-resolution logits
    query_scores: Tensor   # n_q x 1, sigmoid
    entity: M.TripleEntity
    height: int
    width: int

    def mask_logit(self, q: int) -> Tensor:
        col = T.narrow(self.mask_logits, 1, q, 1)
        return T.reshape(col, (self.height, self.width))

    def masks_full(self) -> np.ndarray:
        """Numeric logits, shape (n_q, H, W)."""
        n_q = self.mask_logits.data.shape[1]
        return self.mask_logits.data.T.reshape(n_q, self.height, self.width)

    def scores(self) -> np.ndarray:
        return self.query_scores.data[:, 0]


def predict(decoded: Tensor, f_img_part: Tensor, cfg: ModelConfig,
            params: ModelParams, height: int, width: int) -> tuple:
    """Box/score/mask heads; returns tensors, entity assembly is the caller's."""
    boxes = T.sigmoid(params.box_head(decoded))
    scores = T.sigmoid(params.score_head(decoded))
    embed = params.mask_embed(decoded)
    hp, wp = height // cfg.patch, width // cfg.patch
    low = T.matmul(f_img_part, T.transpose(embed))    # (H'*W') x n_q
    up = T.constant(upsample_matrix(hp, wp, cfg.patch))
    full = T.matmul(up, low)                          # (H*W) x n_q
    return boxes, scores, full


def select_referred_query(out: FrameOutput) -> int:
    """Argmax of query scores; ties break toward the lowest index."""
    return int(np.argmax(out.scores()))


def forward_frame(rgb: np.ndarray, text_ids: np.ndarray, queries: Tensor,
                  cfg: ModelConfig, params: ModelParams,
                  msa_cfg: MSA.MsaConfig, msa_on: bool,
                  mem_tokens: Tensor | None = None) -> tuple:
    """One frame through MSA, encoding, fusion, decoding and the heads.

    mem_tokens rows (the embedded memory, one row per stored query summary)
    are appended to the fused sequence the decoder cross-attends over, so a
    query consults its past exactly when the current frame gives it little
    to attend to, instead of having the past forced in unconditionally.

    Returns (FrameOutput without entity fields filled, decoded queries).
    """
    if msa_on:
        _, _, weighted = MSA.msa_map(MSA.Frame(rgb), msa_cfg)
    else:
        weighted = rgb.astype(np.float64)
    h, w = rgb.shape[:2]
    f_img = encode_frame(weighted, cfg, params)
    f_text = encode_text_ids(text_ids, params)
    f_m = fuse(f_img, f_text, cfg, params)
    n_img = f_img.data.shape[0]
    if mem_tokens is not None:
        f_m = T.concat([f_m, mem_tokens], axis=0)
    decoded = decode_queries(f_m, queries, cfg, params)
    f_img_out = T.narrow(f_m, 0, 0, n_img)
    boxes, scores, full = predict(decoded, f_img_out, cfg, params, h, w)
    return boxes, scores, full, decoded


def forward_video(frames: list[np.ndarray], expression: str, vocab: Vocabulary,
                  cfg: ModelConfig, params: ModelParams,
                  msa_cfg: MSA.MsaConfig | None = None,
                  msa_on: bool = True,
                  memory_mode: str = "intra+hier",
                  trace: list | None = None) -> list[FrameOutput]:
    """Process a video clip-by-clip, maintaining the memory window."""
    if not frames:
        raise ShapeError("forward_video needs at least one frame")
    if memory_mode not in MEMORY_MODES:
        raise ConfigError(f"memory_mode must be one of {MEMORY_MODES}")
    msa_cfg = msa_cfg or MSA.MsaConfig()
    text_ids = vocab.encode(expression)
    window = M.MemoryWindow()
    pending: list[M.TripleEntity] = []
    prev_entity: M.TripleEntity | None = None
    outputs: list[FrameOutput] = []
    for t, rgb in enumerate(frames):
        clip_index = t // M.CLIP_LEN
        refreshed_rep = None
        mem_tokens = None
        use_inter = (memory_mode in ("intra+single", "intra+hier")
                     and len(window) > 0 and prev_entity is not None)
        if use_inter:
            hier = M.build_hierarchy(window)
            if memory_mode == "intra+single":
                hier = M.HierarchicalMemory(hier.t1, hier.t1, hier.t1)
            h_mem = M.memory_embed(hier, params.memory)
            e_m = M.memory_read(prev_entity, h_mem, params.memory)
            # residual on the learned initial queries: they are the stable
            # basis the decoder is trained against, and the read output alone
            # is near-uniform across queries early in training, which would
            # collapse them
            queries = e_m + params.init_queries
            # the embedded memory also joins the decoder's key/value sequence,
            # so access to the past is attention-gated per query and per frame
            mem_tokens = h_mem
            refreshed_rep = M.propagate(e_m, params.memory)
        elif memory_mode != "off" and prev_entity is not None:
            queries = prev_entity.t_que
        else:
            queries = params.init_queries
        boxes, scores, full, decoded = forward_frame(
            rgb, text_ids, queries, cfg, params, msa_cfg, msa_on,
            mem_tokens=mem_tokens)
        # the refresh is residual on the decoded queries so stored clip
        # content stays informative even while the read branch is untrained.
        # Stored entities are detached snapshots: gradients never flow back
        # through earlier frames, so training stays per-frame stable instead
        # of backpropagating through the whole video
        stored_rep = decoded + refreshed_rep if refreshed_rep is not None \
            else decoded
        entity = M.TripleEntity(
            t_box=boxes.data.copy(),
            t_rep=T.constant(stored_rep.data.copy()),
            t_que=T.constant(decoded.data.copy()),
        )
        outputs.append(FrameOutput(boxes=boxes, mask_logits=full,
                                   query_scores=scores, entity=entity,
                                   height=rgb.shape[0], width=rgb.shape[1]))
        if trace is not None:
            trace.append(M.trace_record(clip_index, entity))
        pending.append(entity)
        if len(pending) == M.CLIP_LEN or t == len(frames) - 1:
            M.push_clip(window, M.ClipRecord.from_entities(clip_index, pending))
            pending = []
        prev_entity = entity
    return outputs
