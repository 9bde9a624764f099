"""Single-stream transformer encoder with masked-token and masked-region heads.

Text positions are embedded as token + per-segment position + language
embeddings; region slots as projected feature + projected box + a
dedicated visual language embedding (no sequential position: regions
are set-like, geometry travels in the box projection). Both segments
flow through the same post-norm encoder stack with full bidirectional
attention. The token head is weight-tied to the input embedding; the
region head is a fresh linear classifier over detector labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bpe import LANG_VIS, MASK
from .errors import ConfigError
from .masking import MASK_EMBED, SUBSTITUTE, MaskedBatch
from .rng import Pcg32
from .tensor import Tensor

NEG_INF = -1.0e9  # additive mask value; exp() underflows to exactly 0
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    label_vocab_size: int
    feat_dim: int
    d_model: int = 512
    ffn_dim: int = 2048
    n_layers: int = 6
    n_heads: int = 8
    dropout: float = 0.1
    max_positions: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    @classmethod
    def desk(cls, vocab_size: int, label_vocab_size: int, feat_dim: int, **kw):
        """CPU-friendly configuration used throughout the experiments."""
        defaults = dict(d_model=64, ffn_dim=256, n_layers=2, n_heads=4,
                        dropout=0.1, max_positions=64)
        defaults.update(kw)
        return cls(vocab_size, label_vocab_size, feat_dim, **defaults)


class ParamStore:
    """Ordered collection of named parameter tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return self._tensors.values()

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        return out

    def copy_from(self, other: "ParamStore", src_name: str, dst_name: str) -> None:
        self._tensors[dst_name].data[...] = other[src_name].data

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


def _normal(rng: Pcg32, shape, std=INIT_STD):
    return (rng.normal(shape, dtype=np.float64) * std).astype(T.default_dtype())


def _zeros(shape):
    return np.zeros(shape, dtype=T.default_dtype())


def _ones(shape):
    return np.ones(shape, dtype=T.default_dtype())


def add_layer_params(params: ParamStore, prefix: str, d: int, f: int, rng: Pcg32) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.attn.{name}", _normal(rng, (d, d)))
        params.add(f"{prefix}.attn.b{name[1]}", _zeros(d))
    params.add(f"{prefix}.norm1.g", _ones(d))
    params.add(f"{prefix}.norm1.b", _zeros(d))
    params.add(f"{prefix}.ffn.w1", _normal(rng, (d, f)))
    params.add(f"{prefix}.ffn.b1", _zeros(f))
    params.add(f"{prefix}.ffn.w2", _normal(rng, (f, d)))
    params.add(f"{prefix}.ffn.b2", _zeros(d))
    params.add(f"{prefix}.norm2.g", _ones(d))
    params.add(f"{prefix}.norm2.b", _zeros(d))


def init_encoder_params(cfg: EncoderConfig, rng: Pcg32) -> ParamStore:
    """BERT-style initialisation: embeddings and weights N(0, 0.02^2)."""
    d = cfg.d_model
    params = ParamStore()
    params.add("token_emb", _normal(rng, (cfg.vocab_size, d)))
    params.add("pos_emb", _normal(rng, (cfg.max_positions, d)))
    params.add("lang_emb", _normal(rng, (3, d)))
    params.add("feat_proj.w", _normal(rng, (cfg.feat_dim, d)))
    params.add("feat_proj.b", _zeros(d))
    params.add("bbox_proj.w", _normal(rng, (4, d)))
    params.add("bbox_proj.b", _zeros(d))
    for i in range(cfg.n_layers):
        add_layer_params(params, f"layers.{i}", d, cfg.ffn_dim, rng)
    params.add("mlm_bias", _zeros(cfg.vocab_size))
    params.add("mrc.w", _normal(rng, (d, cfg.label_vocab_size)))
    params.add("mrc.b", _zeros(cfg.label_vocab_size))
    return params


def linear(x: Tensor, params: ParamStore, w: str, b: str) -> Tensor:
    return T.matmul(x, params[w]) + params[b]


def attention(params: ParamStore, prefix: str, x_q: Tensor, x_kv: Tensor,
              add_mask: np.ndarray | None, n_heads: int, dropout: float,
              rng: Pcg32, training: bool, collect: list | None = None) -> Tensor:
    """Multi-head attention; add_mask is broadcast onto the score logits."""
    bsz, t_q, d = x_q.shape
    t_k = x_kv.shape[1]
    hd = d // n_heads
    q = linear(x_q, params, f"{prefix}.wq", f"{prefix}.bq")
    k = linear(x_kv, params, f"{prefix}.wk", f"{prefix}.bk")
    v = linear(x_kv, params, f"{prefix}.wv", f"{prefix}.bv")
    q = T.transpose(T.reshape(q, (bsz, t_q, n_heads, hd)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (bsz, t_k, n_heads, hd)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (bsz, t_k, n_heads, hd)), (0, 2, 1, 3))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    if add_mask is not None:
        scores = scores + add_mask
    probs = T.softmax(scores, axis=-1)
    if collect is not None:
        collect.append(probs.data)
    probs = T.dropout(probs, dropout, rng, training)
    ctx = T.matmul(probs, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, t_q, d))
    return linear(ctx, params, f"{prefix}.wo", f"{prefix}.bo")


def encoder_layer(params: ParamStore, prefix: str, x: Tensor,
                  add_mask: np.ndarray | None, cfg: EncoderConfig,
                  rng: Pcg32, training: bool, collect: list | None = None) -> Tensor:
    attn = attention(params, f"{prefix}.attn", x, x, add_mask, cfg.n_heads,
                     cfg.dropout, rng, training, collect)
    x = T.layer_norm(x + T.dropout(attn, cfg.dropout, rng, training),
                     params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.b"])
    h = T.gelu(linear(x, params, f"{prefix}.ffn.w1", f"{prefix}.ffn.b1"))
    h = linear(h, params, f"{prefix}.ffn.w2", f"{prefix}.ffn.b2")
    x = T.layer_norm(x + T.dropout(h, cfg.dropout, rng, training),
                     params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.b"])
    return x


def key_padding_mask(pad_mask: np.ndarray, num_regions: int) -> np.ndarray:
    """(B, 1, 1, T) additive mask; region slots are never padding."""
    bsz = pad_mask.shape[0]
    if num_regions:
        vis = np.zeros((bsz, num_regions), dtype=bool)
        pad_mask = np.concatenate([pad_mask, vis], axis=1)
    mask = np.where(pad_mask, NEG_INF, 0.0).astype(T.default_dtype())
    return mask[:, None, None, :]


def embed_batch(params: ParamStore, cfg: EncoderConfig, batch: MaskedBatch,
                rng: Pcg32, training: bool) -> Tensor:
    """Resolve masking directives and sum the input embeddings."""
    tok = T.embedding(params["token_emb"], batch.token_ids)
    pos = T.embedding(params["pos_emb"], batch.pos_ids)
    lang = T.embedding(params["lang_emb"], batch.lang_ids)
    x = tok + pos + lang
    if batch.num_regions:
        if batch.feats.shape[-1] != cfg.feat_dim:
            raise ConfigError(
                f"region feature dim {batch.feats.shape[-1]} != model feat_dim {cfg.feat_dim}"
            )
        feats = batch.feats
        bboxes = batch.bboxes
        sub = batch.vis_directives == SUBSTITUTE
        if np.any(sub):
            feats = feats.copy()
            bboxes = bboxes.copy()
            for b, slot in zip(*np.nonzero(sub)):
                ob, oslot = batch.vis_substitutes[b, slot]
                feats[b, slot] = batch.feats[ob, oslot]
                bboxes[b, slot] = batch.bboxes[ob, oslot]
        proj = (
            T.matmul(Tensor(feats.astype(T.default_dtype())), params["feat_proj.w"])
            + params["feat_proj.b"]
            + T.matmul(Tensor(bboxes.astype(T.default_dtype())), params["bbox_proj.w"])
            + params["bbox_proj.b"]
        )
        keep = (batch.vis_directives != MASK_EMBED).astype(T.default_dtype())
        keep = Tensor(keep[:, :, None])
        mask_vec = T.embedding(params["token_emb"], np.full((1, 1), MASK))
        vis = proj * keep + mask_vec * (1.0 - keep.data)
        vis = vis + T.embedding(
            params["lang_emb"],
            np.full((batch.batch_size, batch.num_regions), LANG_VIS),
        )
        x = T.concat([x, vis], axis=1)
    return T.dropout(x, cfg.dropout, rng, training)


def encode(params: ParamStore, cfg: EncoderConfig, x: Tensor,
           add_mask: np.ndarray | None, rng: Pcg32, training: bool,
           collect_attn: list | None = None) -> Tensor:
    for i in range(cfg.n_layers):
        x = encoder_layer(params, f"layers.{i}", x, add_mask, cfg, rng,
                          training, collect_attn)
    return x


@dataclass
class LossOutput:
    loss: Tensor
    mlm_loss: float
    mrc_loss: float | None
    mlm_acc: float
    mrc_acc: float | None
    n_text: int
    n_vis: int

    @property
    def masked_prediction_accuracy(self) -> float:
        """Accuracy pooled over all masked positions, text and visual."""
        total = self.n_text + self.n_vis
        if total == 0:
            return float("nan")
        acc = self.mlm_acc * self.n_text
        if self.n_vis:
            acc += self.mrc_acc * self.n_vis
        return acc / total


def vtlm_loss(params: ParamStore, cfg: EncoderConfig, batch: MaskedBatch,
              rng: Pcg32, training: bool) -> LossOutput:
    """Joint masked-token + masked-region objective (equal weights)."""
    x = embed_batch(params, cfg, batch, rng, training)
    add_mask = key_padding_mask(batch.pad_mask, batch.num_regions)
    states = encode(params, cfg, x, add_mask, rng, training)
    bsz, total_len, d = states.shape
    flat = T.reshape(states, (bsz * total_len, d))

    terms = []
    mlm_loss_val = 0.0
    mlm_acc = float("nan")
    n_text = len(batch.text_target_ids)
    if n_text:
        idx = batch.text_target_pos[:, 0] * total_len + batch.text_target_pos[:, 1]
        rows = T.gather_rows(flat, idx)
        logits = T.matmul(rows, T.transpose(params["token_emb"], (1, 0))) + params["mlm_bias"]
        mlm = T.cross_entropy(logits, batch.text_target_ids)
        terms.append(mlm)
        mlm_loss_val = mlm.item()
        mlm_acc = float(np.mean(np.argmax(logits.data, axis=1) == batch.text_target_ids))

    mrc_loss_val = None
    mrc_acc = None
    n_vis = len(batch.vis_target_ids)
    if n_vis:
        vidx = (
            batch.vis_target_pos[:, 0] * total_len
            + batch.text_len
            + batch.vis_target_pos[:, 1]
        )
        vrows = T.gather_rows(flat, vidx)
        vlogits = T.matmul(vrows, params["mrc.w"]) + params["mrc.b"]
        mrc = T.cross_entropy(vlogits, batch.vis_target_ids)
        terms.append(mrc)
        mrc_loss_val = mrc.item()
        mrc_acc = float(np.mean(np.argmax(vlogits.data, axis=1) == batch.vis_target_ids))

    if not terms:
        raise ValueError("batch has no prediction targets")
    loss = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return LossOutput(loss, mlm_loss_val, mrc_loss_val, mlm_acc, mrc_acc,
                      n_text, n_vis)
