"""Toy segmenter: tokenization of frames and text, encoder/decoder blocks
against numpy compositions, heads, video forward pass, training loop and
checkpoints."""
import numpy as np
import pytest

from refshadow import losses as L
from refshadow import model as MOD
from refshadow import msa as MSA
from refshadow import tensor as T
from refshadow import train as TR
from refshadow.checkpoint import load_checkpoint, save_checkpoint
from refshadow.data import SynthConfig, generate_synthetic, load_manifest
from refshadow.errors import CheckpointError, ConfigError, ShapeError
from refshadow.model import ModelConfig, Vocabulary
from refshadow.tensor import Tensor

EXPRS = ["the hard shadow of the square is moving across the ground",
         "the soft shadow of the rectangle is staying still on the ground"]
CFG = ModelConfig(d=16, n_q=3, heads=4, patch=4, ff_hidden=24, seed=0)


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.from_expressions(EXPRS)


@pytest.fixture(scope="module")
def params(vocab):
    return MOD.init_params(CFG, vocab)


@pytest.fixture(scope="module")
def train_setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_ds")
    cfg = SynthConfig(n_videos=3, n_train=2, frames_per_video=4,
                      height=24, width=24, seed=5)
    _, manifest = generate_synthetic(cfg, out)
    samples = TR.load_samples(manifest, "train")
    vocab = Vocabulary.from_expressions(s.expression for s in samples)
    return samples, vocab


# --- vocabulary -------------------------------------------------------------------

def test_vocab_reserves_unknown_at_zero(vocab):
    assert vocab.token_to_index[MOD.UNK_TOKEN] == 0
    assert len(vocab) == len({t for e in EXPRS for t in e.split()}) + 1


def test_vocab_encode_known_and_unknown(vocab):
    ids = vocab.encode("the shadow is purple")
    assert ids[0] == vocab.token_to_index["the"]
    assert ids[-1] == 0  # "purple" unseen


def test_vocab_rejects_empty_expression(vocab):
    with pytest.raises(ConfigError):
        vocab.encode("   ")


def test_vocab_requires_unknown_mapping():
    with pytest.raises(ConfigError):
        Vocabulary({"the": 0})


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(n_q=0)


# --- frame tokens ------------------------------------------------------------------

def patch_mean_oracle(img, patch):
    h, w = img.shape[:2]
    hp, wp = h // patch, w // patch
    out = np.zeros((hp * wp, 3))
    for i in range(hp):
        for j in range(wp):
            block = img[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch]
            for c in range(3):
                out[i * wp + j, c] = block[:, :, c].mean()
    out = out / 255.0
    out = out - out.mean(axis=0, keepdims=True)
    return out / (out.std(axis=0, keepdims=True) + 1e-6)


def test_patch_tokens_match_loop_oracle():
    img = rng(1).uniform(0, 400, size=(16, 16, 3))
    got = MOD.patch_tokens(img, 4)
    np.testing.assert_allclose(got, patch_mean_oracle(img, 4), atol=1e-10)


def test_patch_tokens_constant_frame_is_all_zeros():
    # a featureless frame carries no contrast; standardization maps it to 0
    img = np.full((8, 8, 3), 177.0)
    got = MOD.patch_tokens(img, 4)
    np.testing.assert_allclose(got, 0.0, atol=1e-12)


def test_patch_tokens_rejects_small_frame():
    with pytest.raises(ShapeError):
        MOD.patch_tokens(np.zeros((3, 3, 3)), 4)


def test_encode_frame_adds_position_codes(params):
    img = rng(2).uniform(0, 255, size=(16, 16, 3))
    feats = MOD.patch_tokens(img, CFG.patch)
    got = MOD.encode_frame(img, CFG, params)
    base = params.img_proj(T.constant(feats)).data
    codes = MOD._position_codes(feats.shape[0], CFG.d)
    np.testing.assert_allclose(got.data, base + codes, atol=1e-12)


def test_position_codes_structure():
    codes = MOD._position_codes(5, 8)
    np.testing.assert_allclose(codes[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-12)
    assert np.all(np.abs(codes) <= 1.0)
    # distinct positions get distinct codes
    assert not np.allclose(codes[1], codes[2])


def test_upsample_matrix_rows_sum_to_one():
    u = MOD.upsample_matrix(4, 4, 4)
    assert u.shape == (256, 16)
    np.testing.assert_allclose(u.sum(axis=1), 1.0, atol=1e-12)


def test_upsample_matrix_patch_one_is_identity():
    np.testing.assert_array_equal(MOD.upsample_matrix(3, 3, 1), np.eye(9))


def test_upsample_is_separable_bilinear():
    low = rng(3).normal(size=(3, 4))
    uh = MOD._upsample_1d(6, 3)
    uw = MOD._upsample_1d(8, 4)
    expect = uh @ low @ uw.T
    got = (MOD.upsample_matrix(3, 4, 2) @ low.reshape(-1)).reshape(6, 8)
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_upsample_constant_field_stays_constant():
    got = MOD.upsample_matrix(4, 4, 3) @ np.full(16, 2.5)
    np.testing.assert_allclose(got, 2.5, atol=1e-12)


# --- text tokens ------------------------------------------------------------------

def test_encode_text_repeated_token_rows_identical(vocab, params):
    out = MOD.encode_text("the shadow the shadow", vocab, params)
    np.testing.assert_array_equal(out.data[0], out.data[2])
    np.testing.assert_array_equal(out.data[1], out.data[3])


def test_encode_text_unknown_uses_row_zero(vocab, params):
    out = MOD.encode_text("zebra", vocab, params)
    np.testing.assert_array_equal(out.data[0], params.text_embed.data[0])


# --- encoder / decoder against numpy compositions -------------------------------------

def np_linear(layer, x):
    return x @ layer.weight.data.T + layer.bias.data


def np_attention(q, k, v, heads, p):
    qp, kp, vp = np_linear(p.wq, q), np_linear(p.wk, k), np_linear(p.wv, v)
    dh = q.shape[1] // heads
    outs = []
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        sc = qp[:, s] @ kp[:, s].T / np.sqrt(dh)
        e = np.exp(sc - sc.max(axis=1, keepdims=True))
        outs.append(e / e.sum(axis=1, keepdims=True) @ vp[:, s])
    return np_linear(p.wo, np.concatenate(outs, axis=1))


def np_ff(x, ff1, ff2):
    return np_linear(ff2, np.maximum(0.0, np_linear(ff1, x)))


def test_fuse_matches_numpy_composition(vocab, params):
    r = rng(4)
    f_img = Tensor(r.normal(size=(6, CFG.d)))
    f_text = Tensor(r.normal(size=(3, CFG.d)))
    got = MOD.fuse(f_img, f_text, CFG, params)
    x = np.concatenate([f_img.data, f_text.data], axis=0)
    for b in params.enc_blocks:
        x = x + np_attention(x, x, x, CFG.heads, b.attn)
        x = x + np_ff(x, b.ff1, b.ff2)
    np.testing.assert_allclose(got.data, x, atol=1e-10)


def test_fuse_rejects_width_mismatch(vocab, params):
    with pytest.raises(ShapeError):
        MOD.fuse(Tensor(np.zeros((2, CFG.d))), Tensor(np.zeros((2, CFG.d + 1))),
                 CFG, params)


def test_fuse_zero_inputs_zero_biases_gives_zero(vocab):
    p = MOD.init_params(CFG, vocab)
    for b in p.enc_blocks:
        for layer in (*b.attn.layers(), b.ff1, b.ff2):
            layer.bias.data = np.zeros_like(layer.bias.data)
    out = MOD.fuse(Tensor(np.zeros((4, CFG.d))), Tensor(np.zeros((2, CFG.d))),
                   CFG, p)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_decode_queries_matches_numpy_composition(vocab, params):
    r = rng(5)
    f_m = Tensor(r.normal(size=(7, CFG.d)))
    q = Tensor(r.normal(size=(CFG.n_q, CFG.d)))
    got = MOD.decode_queries(f_m, q, CFG, params)
    x = q.data
    for b in params.dec_blocks:
        x = x + np_attention(x, x, x, CFG.heads, b.self_attn)
        x = x + np_attention(x, f_m.data, f_m.data, CFG.heads, b.cross_attn)
        x = x + np_ff(x, b.ff1, b.ff2)
    np.testing.assert_allclose(got.data, x, atol=1e-10)


# --- heads -----------------------------------------------------------------------------

def test_predict_outputs_are_probabilities_and_shapes(vocab, params):
    r = rng(6)
    decoded = Tensor(r.normal(size=(CFG.n_q, CFG.d)))
    f_img = Tensor(r.normal(size=(16, CFG.d)))  # 4x4 patch grid of 16x16 frame
    boxes, scores, full = MOD.predict(decoded, f_img, CFG, params, 16, 16)
    assert boxes.data.shape == (CFG.n_q, 4)
    assert np.all((boxes.data > 0) & (boxes.data < 1))
    assert scores.data.shape == (CFG.n_q, 1)
    assert np.all((scores.data > 0) & (scores.data < 1))
    assert full.data.shape == (256, CFG.n_q)


def test_predict_mask_is_upsampled_token_dot_product(vocab, params):
    r = rng(7)
    decoded = Tensor(r.normal(size=(CFG.n_q, CFG.d)))
    f_img = Tensor(r.normal(size=(16, CFG.d)))
    _, _, full = MOD.predict(decoded, f_img, CFG, params, 16, 16)
    embed = np_linear(params.mask_embed, decoded.data)
    low = np.zeros((16, CFG.n_q))
    for i in range(16):
        for q in range(CFG.n_q):
            low[i, q] = float(f_img.data[i] @ embed[q])
    expect = MOD.upsample_matrix(4, 4, CFG.patch) @ low
    np.testing.assert_allclose(full.data, expect, atol=1e-10)


def test_frame_output_mask_logit_matches_masks_full(vocab, params):
    r = rng(8)
    out = forward_one_frame(r, vocab, params)
    for q in range(CFG.n_q):
        np.testing.assert_array_equal(out.mask_logit(q).data,
                                      out.masks_full()[q])


def test_select_referred_query_ties_break_low():
    r = rng(9)
    out = MOD.FrameOutput(
        boxes=Tensor(r.random((3, 4))),
        mask_logits=Tensor(r.normal(size=(4, 3))),
        query_scores=Tensor(np.array([[0.4], [0.7], [0.7]])),
        entity=None, height=2, width=2)
    assert MOD.select_referred_query(out) == 1


# --- video forward pass -------------------------------------------------------------------

def forward_one_frame(r, vocab, params, **kw):
    frame = r.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    return MOD.forward_video([frame], EXPRS[0], vocab, CFG, params,
                             msa_cfg=MSA.MsaConfig(), **kw)[0]


def test_single_frame_video_memory_modes_agree_bitwise(vocab, params):
    """Cold start: with no completed clip the memory path must not fire."""
    r = rng(10)
    frame = r.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    outs = {}
    for mode in MOD.MEMORY_MODES:
        outs[mode] = MOD.forward_video([frame], EXPRS[0], vocab, CFG, params,
                                       memory_mode=mode)[0]
    base = outs["off"]
    for mode, out in outs.items():
        np.testing.assert_array_equal(out.boxes.data, base.boxes.data)
        np.testing.assert_array_equal(out.mask_logits.data,
                                      base.mask_logits.data)
        np.testing.assert_array_equal(out.query_scores.data,
                                      base.query_scores.data)


def test_forward_video_output_count_and_trace(vocab, params):
    r = rng(11)
    frames = [r.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
              for _ in range(8)]
    trace = []
    outs = MOD.forward_video(frames, EXPRS[0], vocab, CFG, params,
                             memory_mode="intra+hier", trace=trace)
    assert len(outs) == 8
    assert [t["clip_index"] for t in trace] == [i // 3 for i in range(8)]


def test_forward_video_is_pure(vocab, params):
    r = rng(12)
    frames = [r.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
              for _ in range(4)]
    a = MOD.forward_video(frames, EXPRS[0], vocab, CFG, params)
    b = MOD.forward_video(frames, EXPRS[0], vocab, CFG, params)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.mask_logits.data, y.mask_logits.data)


def test_forward_video_rejects_empty_and_bad_mode(vocab, params):
    with pytest.raises(ShapeError):
        MOD.forward_video([], EXPRS[0], vocab, CFG, params)
    frame = np.zeros((16, 16, 3), dtype=np.uint8)
    with pytest.raises(ConfigError):
        MOD.forward_video([frame], EXPRS[0], vocab, CFG, params,
                          memory_mode="sometimes")


def test_full_frame_loss_backward_reaches_parameters(vocab, params):
    r = rng(13)
    frame = r.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    gt = np.zeros((16, 16), bool)
    gt[4:10, 6:12] = True
    out = MOD.forward_video([frame], EXPRS[0], vocab, CFG, params)[0]
    from refshadow.data import gt_box_from_mask
    loss = TR.frame_loss(out, gt_box_from_mask(gt), gt, L.LossConfig(), 1.0)
    for _, t in params.named_tensors():
        t.zero_grad()
    loss.backward()
    named = dict(params.named_tensors())
    nonzero = sum(1 for t in named.values()
                  if t.grad is not None and np.any(t.grad != 0.0))
    assert np.isfinite(loss.item())
    # memory parameters see no gradient on a single frame; the rest must
    assert nonzero >= sum(1 for k in named if not k.startswith("mem.")) - 2


# --- optimizer and training loop ---------------------------------------------------------

def test_adamw_minimizes_quadratic():
    x = Tensor(np.array([5.0]), requires_grad=True)
    opt = TR.AdamW({"x": x}, lr=0.1, weight_decay=0.0)
    for _ in range(400):
        opt.zero_grad()
        loss = (x - 3.0) * (x - 3.0)
        loss.backward()
        opt.step()
    assert abs(x.data[0] - 3.0) < 1e-4


def test_adamw_decoupled_weight_decay_shrinks_params():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = TR.AdamW({"x": x}, lr=0.01, weight_decay=0.5)
    opt.zero_grad()
    (x * 0.0).backward()  # zero gradient: only decay acts
    opt.step()
    assert x.data[0] == pytest.approx(1.0 * (1 - 0.01 * 0.5), abs=1e-12)


def test_clip_gradients_scales_to_ceiling():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([0.0, 4.0, 0.0])  # global norm 5
    total = TR.clip_gradients({"a": a, "b": b}, 1.0)
    assert total == pytest.approx(5.0)
    joined = np.concatenate([a.grad, b.grad])
    assert np.linalg.norm(joined) == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])


def test_clip_gradients_leaves_small_gradients_alone():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([0.3, 0.4])
    TR.clip_gradients({"a": a}, 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])


def test_train_zero_lr_keeps_parameters(train_setup):
    samples, vocab = train_setup
    mcfg = ModelConfig(d=16, n_q=3, heads=4, patch=4, ff_hidden=24, seed=1)
    params = MOD.init_params(mcfg, vocab)
    before = {k: t.data.copy() for k, t in params.named_tensors()}
    TR.train(samples, mcfg, params, vocab,
             TR.TrainConfig(epochs=1, lr=0.0, weight_decay=0.0))
    for k, t in params.named_tensors():
        np.testing.assert_array_equal(t.data, before[k])


def test_train_is_deterministic(train_setup):
    samples, vocab = train_setup
    mcfg = ModelConfig(d=16, n_q=3, heads=4, patch=4, ff_hidden=24, seed=2)
    reports = []
    finals = []
    for _ in range(2):
        params = MOD.init_params(mcfg, vocab)
        rep = TR.train(samples, mcfg, params, vocab,
                       TR.TrainConfig(epochs=2, lr=1e-3, seed=3))
        reports.append([e["mean_loss"] for e in rep.epochs])
        finals.append({k: t.data.copy() for k, t in params.named_tensors()})
    assert reports[0] == reports[1]
    for k in finals[0]:
        np.testing.assert_array_equal(finals[0][k], finals[1][k])


def test_train_decay_schedule_lowers_lr(train_setup):
    samples, vocab = train_setup
    mcfg = ModelConfig(d=16, n_q=3, heads=4, patch=4, ff_hidden=24, seed=4)
    params = MOD.init_params(mcfg, vocab)
    rep = TR.train(samples, mcfg, params, vocab,
                   TR.TrainConfig(epochs=3, lr=1e-3, decay_epochs=(1,),
                                  decay_factor=0.1))
    assert rep.epochs[0]["lr"] == pytest.approx(1e-3)
    assert rep.epochs[1]["lr"] == pytest.approx(1e-4)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TR.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TR.TrainConfig(memory_mode="everything")


def test_match_query_picks_lowest_cost(vocab, params):
    r = rng(14)
    out = forward_one_frame(r, vocab, params)
    gt = np.zeros((16, 16), bool)
    gt[2:8, 2:8] = True
    from refshadow.data import gt_box_from_mask
    q = TR.match_query(out, gt_box_from_mask(gt), gt)
    assert 0 <= q < CFG.n_q


def test_evaluate_oracle_mode_scores_one(train_setup):
    samples, vocab = train_setup
    rep = TR.evaluate(samples, None, None, None, oracle=True)
    assert rep.mean_iou == 1.0 and rep.overall_iou == 1.0
    assert rep.map_50_95 == 1.0
    assert all(v == 1.0 for v in rep.precision_at.values())


# --- checkpoints -----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, vocab, params):
    path = tmp_path / "ck.json"
    save_checkpoint(path, CFG, params, vocab)
    cfg2, params2, vocab2 = load_checkpoint(path)
    assert cfg2 == CFG
    assert vocab2.token_to_index == vocab.token_to_index
    for (k1, t1), (k2, t2) in zip(params.named_tensors(),
                                  params2.named_tensors()):
        assert k1 == k2
        np.testing.assert_array_equal(t1.data, t2.data)


def test_checkpoint_missing_file():
    with pytest.raises(CheckpointError):
        load_checkpoint("/nonexistent/ck.json")


def test_checkpoint_bad_version(tmp_path, vocab, params):
    import json
    path = tmp_path / "ck.json"
    save_checkpoint(path, CFG, params, vocab)
    obj = json.loads(path.read_text())
    obj["version"] = 99
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path, vocab, params):
    import json
    path = tmp_path / "ck.json"
    save_checkpoint(path, CFG, params, vocab)
    obj = json.loads(path.read_text())
    obj["params"]["init_queries"] = [[0.0] * CFG.d]  # wrong row count
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError, match="init_queries"):
        load_checkpoint(path)
