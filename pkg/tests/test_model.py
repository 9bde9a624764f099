import math

import numpy as np
import pytest

from vtlm import bpe, tensor as T
from vtlm.masking import (
    MASK_EMBED,
    MaskPolicy,
    TLM,
    VTLM,
    build_masked_batch,
    build_stream,
)
from vtlm.model import (
    EncoderConfig,
    ParamStore,
    embed_batch,
    encode,
    init_encoder_params,
    key_padding_mask,
    vtlm_loss,
)
from vtlm.rng import Pcg32
from vtlm.synthetic import GenConfig, generate_synthetic
from vtlm.trainer import AdamState, adam_step


CFG = GenConfig(num_examples=16, feat_dim=8, num_merges=150)


@pytest.fixture(scope="module")
def examples():
    return generate_synthetic(CFG, seed=3)


def desk_cfg(vocab_size, dropout=0.0):
    return EncoderConfig.desk(vocab_size, CFG.num_labels, CFG.feat_dim,
                              d_model=32, ffn_dim=64, n_layers=2, n_heads=2,
                              dropout=dropout)


def make_batch(examples, mode=VTLM, seed=0, policy=None):
    root = Pcg32(seed)
    vocab = max(max(ex.src_tokens + ex.tgt_tokens) for ex in examples) + 1
    return build_masked_batch(examples, mode, policy or MaskPolicy(), vocab,
                              root.split("t"), root.split("v")), vocab


class TestEmbed:
    def test_mask_embed_slot_is_mask_plus_vis_lang(self, examples):
        batch, vocab = make_batch(examples[:4])
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        # force one slot to MASK_EMBED
        batch.vis_directives[:] = 0
        batch.vis_directives[0, 2] = MASK_EMBED
        x = embed_batch(params, cfg, batch, Pcg32(0), training=False)
        got = x.data[0, batch.text_len + 2]
        expect = params["token_emb"].data[bpe.MASK] + params["lang_emb"].data[bpe.LANG_VIS]
        assert np.allclose(got, expect, atol=1e-6)

    def test_zero_region_embedding_is_projection_biases(self, examples):
        batch, vocab = make_batch(examples[:2])
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        params["feat_proj.b"].data[:] = 0.5
        params["bbox_proj.b"].data[:] = -0.25
        batch.vis_directives[:] = 0
        batch.feats[:] = 0.0
        batch.bboxes[:] = 0.0
        x = embed_batch(params, cfg, batch, Pcg32(0), training=False)
        got = x.data[0, batch.text_len]
        expect = 0.5 - 0.25 + params["lang_emb"].data[bpe.LANG_VIS]
        assert np.allclose(got, expect, atol=1e-6)

    def test_substitute_uses_referenced_region(self, examples):
        batch, vocab = make_batch(examples[:4])
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        batch.vis_directives[:] = 0
        batch.vis_directives[1, 0] = 2  # SUBSTITUTE
        batch.vis_substitutes[1, 0] = (3, 5)
        x = embed_batch(params, cfg, batch, Pcg32(0), training=False)
        # compare against an ORIGINAL batch whose slot carries the donor region
        batch2, _ = make_batch(examples[:4])
        batch2.vis_directives[:] = 0
        batch2.feats[1, 0] = batch.feats[3, 5]
        batch2.bboxes[1, 0] = batch.bboxes[3, 5]
        y = embed_batch(params, cfg, batch2, Pcg32(0), training=False)
        assert np.allclose(x.data[1, batch.text_len], y.data[1, batch2.text_len],
                           atol=1e-6)


class TestEncode:
    def test_attention_rows_sum_to_one_over_nonpad(self, examples):
        batch, vocab = make_batch(examples[:6])
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        x = embed_batch(params, cfg, batch, Pcg32(0), training=False)
        mask = key_padding_mask(batch.pad_mask, batch.num_regions)
        collected = []
        encode(params, cfg, x, mask, Pcg32(0), training=False,
               collect_attn=collected)
        assert len(collected) == cfg.n_layers
        for probs in collected:
            assert np.all(np.abs(probs.sum(axis=-1) - 1.0) < 1e-5)
            # padded keys receive zero attention from every query
            pad_cols = np.concatenate(
                [batch.pad_mask,
                 np.zeros((batch.batch_size, batch.num_regions), bool)], axis=1)
            for b in range(batch.batch_size):
                assert np.all(probs[b, :, :, pad_cols[b]] == 0.0)

    def test_visual_slot_permutation_equivariance(self, examples):
        """Swapping two region slots permutes their states and leaves text
        states unchanged (regions carry no sequential position)."""
        batch, vocab = make_batch(examples[:3])
        batch.vis_directives[:] = 0
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))

        def run(b):
            x = embed_batch(params, cfg, b, Pcg32(0), training=False)
            mask = key_padding_mask(b.pad_mask, b.num_regions)
            return encode(params, cfg, x, mask, Pcg32(0), training=False).data

        states = run(batch)
        swapped, _ = make_batch(examples[:3])
        swapped.vis_directives[:] = 0
        for arr in ("feats", "bboxes", "region_labels"):
            a = getattr(swapped, arr)
            a[0, [2, 5]] = a[0, [5, 2]]
        states_sw = run(swapped)
        t = batch.text_len
        assert np.allclose(states[0, :t], states_sw[0, :t], atol=1e-5)
        assert np.allclose(states[0, t + 2], states_sw[0, t + 5], atol=1e-5)
        assert np.allclose(states[0, t + 5], states_sw[0, t + 2], atol=1e-5)

    def test_degenerate_single_token(self):
        cfg = EncoderConfig.desk(vocab_size=10, label_vocab_size=4, feat_dim=4,
                                 d_model=16, ffn_dim=32, n_layers=1, n_heads=2,
                                 dropout=0.0)
        params = init_encoder_params(cfg, Pcg32(0).split("init"))
        x = T.Tensor(np.zeros((1, 1, 16), dtype=np.float32))
        out = encode(params, cfg, x, None, Pcg32(0), training=False)
        assert out.shape == (1, 1, 16)


class TestVtlmLoss:
    def test_tlm_mode_has_no_mrc_term(self, examples):
        batch, vocab = make_batch(examples[:4], mode=TLM)
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        out = vtlm_loss(params, cfg, batch, Pcg32(0), training=False)
        assert out.mrc_loss is None
        assert out.loss.item() == pytest.approx(out.mlm_loss, abs=1e-7)

    def test_untrained_mrc_loss_near_uniform(self, examples):
        batch, vocab = make_batch(examples)
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        out = vtlm_loss(params, cfg, batch, Pcg32(0), training=False)
        assert out.mrc_loss == pytest.approx(math.log(CFG.num_labels), abs=0.3)

    def test_joint_loss_is_sum_of_terms(self, examples):
        batch, vocab = make_batch(examples[:6])
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        out = vtlm_loss(params, cfg, batch, Pcg32(0), training=False)
        assert out.loss.item() == pytest.approx(out.mlm_loss + out.mrc_loss, rel=1e-6)

    def test_padding_invariance(self, examples):
        """Extra [PAD] columns change no loss value."""
        batch, vocab = make_batch(examples[:4])
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        base = vtlm_loss(params, cfg, batch, Pcg32(0), training=False).loss.item()

        extra = 3
        b2, _ = make_batch(examples[:4])
        b2.vis_directives = batch.vis_directives
        b2.vis_substitutes = batch.vis_substitutes
        pad_block = np.full((batch.batch_size, extra), bpe.PAD, dtype=np.int64)
        b2.token_ids = np.concatenate([batch.token_ids, pad_block], axis=1)
        b2.pos_ids = np.concatenate([batch.pos_ids, np.zeros_like(pad_block)], axis=1)
        b2.lang_ids = np.concatenate([batch.lang_ids, np.zeros_like(pad_block)], axis=1)
        b2.pad_mask = np.concatenate(
            [batch.pad_mask, np.ones((batch.batch_size, extra), bool)], axis=1)
        padded = vtlm_loss(params, cfg, b2, Pcg32(0), training=False).loss.item()
        assert padded == pytest.approx(base, abs=1e-5)

    def test_loss_bits_reproducible(self, examples):
        def run():
            batch, vocab = make_batch(examples[:8], seed=5)
            cfg = desk_cfg(vocab, dropout=0.1)
            params = init_encoder_params(cfg, Pcg32(2).split("init"))
            return vtlm_loss(params, cfg, batch, Pcg32(7).split("d"),
                             training=True).loss.item()

        assert run() == run()

    def test_overfits_one_batch(self, examples):
        """200 optimisation steps on a single small batch drive the joint
        loss under 0.1."""
        batch, vocab = make_batch(examples[:4], seed=9)
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(3).split("init"))
        adam = AdamState.init(params)
        loss = None
        for _ in range(200):
            params.zero_grads()
            out = vtlm_loss(params, cfg, batch, Pcg32(0), training=False)
            out.loss.backward()
            adam_step(params, adam, lr=1e-3)
            loss = out.loss.item()
        assert loss < 0.1


class TestWeightTyingAndGradients:
    def test_vtlm_gradcheck_64bit(self, examples):
        """End-to-end joint loss vs central finite differences on a
        2-example batch, sampled across several parameter tensors."""
        with T.use_dtype(np.float64):
            batch, vocab = make_batch(examples[:2], seed=4)
            cfg = desk_cfg(vocab)
            params = init_encoder_params(cfg, Pcg32(5).split("init"))
            names = ["token_emb", "feat_proj.w", "layers.0.attn.wq",
                     "layers.1.ffn.w1", "mrc.w", "layers.0.norm1.g", "mlm_bias"]
            tensors = [params[n] for n in names]

            def build():
                return vtlm_loss(params, cfg, batch, Pcg32(0), training=False).loss

            err = T.gradcheck(build, tensors, n_samples=28, rng=Pcg32(8), h=1e-3)
        assert err < 1e-4

    def test_tied_embedding_receives_both_paths(self, examples):
        batch, vocab = make_batch(examples[:2])
        cfg = desk_cfg(vocab)
        params = init_encoder_params(cfg, Pcg32(1).split("init"))
        params.zero_grads()
        out = vtlm_loss(params, cfg, batch, Pcg32(0), training=False)
        out.loss.backward()
        # rows of token_emb not present in the input still get gradient
        # through the output projection (weight tying)
        used = set(batch.token_ids.reshape(-1).tolist()) | {bpe.MASK}
        unused = [i for i in range(vocab) if i not in used]
        grad_norms = np.abs(params["token_emb"].grad[unused]).sum()
        assert grad_norms > 0.0
