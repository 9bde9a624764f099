"""Masked-batch construction for the two pretraining objectives.

Text masking follows the standard recipe: 15% of eligible (non-special)
positions are selected, of which 80% become [MASK], 10% a random
non-reserved token, 10% stay intact; the original token is always
recorded as the prediction target. Visual masking selects 15% of region
slots pooled over the whole batch, independently of text masking and on
its own PRNG stream. Selected slots are 80% replaced by the [MASK]
token embedding, 10% substituted with a region drawn from another
example in the batch, 10% left intact. Setting the visual ratio to 0
gives the alternative objective: region inputs stay untouched while
label-prediction positions are still chosen at the text rate.

Stream layout (positions restart at 0 at every [BOS]; the [SEP]
closing a segment carries that segment's language id):

    [BOS] s1 [EOS] [SEP] [BOS] s2 [EOS] [SEP]  (v_1 .. v_o)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import bpe
from .bpe import BOS, EOS, LANG_L1, LANG_L2, LANG_VIS, NUM_RESERVED, PAD, SEP
from .data import TripletExample
from .errors import ConfigError
from .rng import Pcg32

log = logging.getLogger(__name__)

# visual slot directives
ORIGINAL, MASK_EMBED, SUBSTITUTE = 0, 1, 2

TLM, VTLM = "tlm", "vtlm"


def round_count(x: float) -> int:
    """round-half-up, platform independent."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPolicy:
    select_ratio: float = 0.15
    mask_frac: float = 0.80
    random_frac: float = 0.10
    keep_frac: float = 0.10
    visual_select_ratio: float = 0.15

    def __post_init__(self):
        total = self.mask_frac + self.random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("mask/random/keep fractions must sum to 1")


@dataclass
class Stream:
    """One example laid out as a single encoder input."""

    token_ids: np.ndarray     # text part, int64
    pos_ids: np.ndarray
    lang_ids: np.ndarray
    src_positions: np.ndarray  # stream index of each source token
    tgt_positions: np.ndarray
    num_regions: int

    @property
    def text_len(self) -> int:
        return len(self.token_ids)


def build_stream(example: TripletExample, mode: str, max_len: int = 256) -> Stream:
    """Lay out one example; text segments are tail-truncated to fit,
    regions never are."""
    o = len(example.regions) if mode == VTLM else 0
    src = list(example.src_tokens)
    tgt = list(example.tgt_tokens)
    budget = max_len - o - 6
    if budget < 2:
        raise ConfigError(f"max_len={max_len} cannot fit {o} regions")
    while len(src) + len(tgt) > budget:
        if len(src) >= len(tgt) and len(src) > 1:
            src.pop()
        elif len(tgt) > 1:
            tgt.pop()
        else:
            src.pop()
    m, n = len(src), len(tgt)

    token_ids = np.array([BOS] + src + [EOS, SEP, BOS] + tgt + [EOS, SEP], dtype=np.int64)
    pos_ids = np.concatenate([np.arange(m + 3), np.arange(n + 3)])
    lang_ids = np.array([LANG_L1] * (m + 3) + [LANG_L2] * (n + 3), dtype=np.int64)
    src_positions = np.arange(1, m + 1)
    tgt_positions = np.arange(m + 4, m + 4 + n)
    return Stream(token_ids, pos_ids, lang_ids, src_positions, tgt_positions, o)


def eligible_positions(token_ids: np.ndarray) -> np.ndarray:
    return np.flatnonzero(token_ids >= NUM_RESERVED)


def select_count(ratio: float, n_eligible: int) -> int:
    if ratio <= 0.0 or n_eligible == 0:
        return 0
    return max(1, round_count(ratio * n_eligible))


def mask_text(token_ids: np.ndarray, policy: MaskPolicy, rng: Pcg32,
              vocab_size: int) -> tuple[np.ndarray, dict[int, int]]:
    """Corrupt one stream's text part; returns (masked ids, targets)."""
    eligible = eligible_positions(token_ids)
    masked = token_ids.copy()
    targets: dict[int, int] = {}
    n_sel = select_count(policy.select_ratio, len(eligible))
    if n_sel == 0:
        if policy.select_ratio > 0 and len(eligible) == 0:
            log.warning("no eligible tokens to mask; example skipped")
        return masked, targets
    chosen = eligible[rng.choose(len(eligible), n_sel)]
    for pos in chosen:
        pos = int(pos)
        targets[pos] = int(token_ids[pos])
        u = rng.uniform()
        if u < policy.mask_frac:
            masked[pos] = bpe.MASK
        elif u < policy.mask_frac + policy.random_frac:
            masked[pos] = NUM_RESERVED + rng.randint(vocab_size - NUM_RESERVED)
        # else: left intact
    return masked, targets


def mask_visual(region_labels: np.ndarray, policy: MaskPolicy, rng: Pcg32):
    """Select and corrupt region slots, pooled over the batch.

    region_labels is (B, o). Returns (directives (B, o), substitutes
    (B, o, 2), targets {(b, slot): label}).
    """
    b_size, o = region_labels.shape
    directives = np.full((b_size, o), ORIGINAL, dtype=np.int8)
    substitutes = np.zeros((b_size, o, 2), dtype=np.int64)
    targets: dict[tuple[int, int], int] = {}

    alternative = policy.visual_select_ratio == 0.0
    ratio = policy.select_ratio if alternative else policy.visual_select_ratio
    n_sel = select_count(ratio, b_size * o)
    if n_sel == 0:
        return directives, substitutes, targets
    flat = rng.choose(b_size * o, n_sel)
    for f in flat:
        b, slot = divmod(int(f), o)
        targets[(b, slot)] = int(region_labels[b, slot])
        if alternative:
            continue  # inputs stay intact; only prediction positions chosen
        u = rng.uniform()
        if u < policy.mask_frac:
            directives[b, slot] = MASK_EMBED
        elif u < policy.mask_frac + policy.random_frac:
            if b_size < 2:
                # degenerate batch: no other image to draw from; re-draw
                # between mask and keep in their 8:1 proportion
                if rng.uniform() < policy.mask_frac / (policy.mask_frac + policy.keep_frac):
                    directives[b, slot] = MASK_EMBED
                continue
            other = rng.randint(b_size - 1)
            if other >= b:
                other += 1
            directives[b, slot] = SUBSTITUTE
            substitutes[b, slot] = (other, rng.randint(o))
        # else: left intact
    return directives, substitutes, targets


@dataclass
class MaskedBatch:
    """Corrupted encoder input plus prediction targets."""

    mode: str
    token_ids: np.ndarray          # (B, Tt) padded
    pos_ids: np.ndarray
    lang_ids: np.ndarray
    lengths: np.ndarray            # text lengths before padding
    pad_mask: np.ndarray           # (B, Tt) True at padding
    text_target_pos: np.ndarray    # (N, 2) -> (example, stream position)
    text_target_ids: np.ndarray    # (N,)
    num_regions: int = 0
    feats: np.ndarray | None = None        # (B, o, D)
    bboxes: np.ndarray | None = None       # (B, o, 4)
    region_labels: np.ndarray | None = None
    vis_directives: np.ndarray | None = None
    vis_substitutes: np.ndarray | None = None
    vis_target_pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    vis_target_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def text_len(self) -> int:
        return self.token_ids.shape[1]

    @property
    def total_len(self) -> int:
        return self.text_len + self.num_regions


def build_masked_batch(examples: list[TripletExample], mode: str,
                       policy: MaskPolicy, vocab_size: int,
                       rng_text: Pcg32, rng_visual: Pcg32,
                       max_len: int = 256,
                       streams: list[Stream] | None = None) -> MaskedBatch | None:
    """Assemble a padded MaskedBatch; returns None if nothing is maskable."""
    if streams is None:
        streams = [build_stream(ex, mode, max_len) for ex in examples]
    masked_streams = []
    all_targets = []
    kept = []
    for i, s in enumerate(streams):
        masked, targets = mask_text(s.token_ids, policy, rng_text, vocab_size)
        if policy.select_ratio > 0 and not targets:
            continue
        kept.append(i)
        masked_streams.append((s, masked))
        all_targets.append(targets)
    if not masked_streams:
        log.warning("batch skipped: no maskable examples")
        return None
    examples = [examples[i] for i in kept]

    b_size = len(masked_streams)
    t_max = max(s.text_len for s, _ in masked_streams)
    token_ids = np.full((b_size, t_max), PAD, dtype=np.int64)
    pos_ids = np.zeros((b_size, t_max), dtype=np.int64)
    lang_ids = np.zeros((b_size, t_max), dtype=np.int64)
    lengths = np.zeros(b_size, dtype=np.int64)
    tpos, tids = [], []
    for b, ((s, masked), targets) in enumerate(zip(masked_streams, all_targets)):
        ln = s.text_len
        token_ids[b, :ln] = masked
        pos_ids[b, :ln] = s.pos_ids
        lang_ids[b, :ln] = s.lang_ids
        lengths[b] = ln
        for pos, orig in sorted(targets.items()):
            tpos.append((b, pos))
            tids.append(orig)
    pad_mask = np.arange(t_max)[None, :] >= lengths[:, None]

    batch = MaskedBatch(
        mode=mode,
        token_ids=token_ids,
        pos_ids=pos_ids,
        lang_ids=lang_ids,
        lengths=lengths,
        pad_mask=pad_mask,
        text_target_pos=np.array(tpos, dtype=np.int64).reshape(-1, 2),
        text_target_ids=np.array(tids, dtype=np.int64),
    )
    if mode == VTLM:
        o = len(examples[0].regions)
        feats = np.stack([np.stack([r.feat for r in ex.regions]) for ex in examples])
        bboxes = np.stack([np.stack([r.bbox for r in ex.regions]) for ex in examples])
        labels = np.array([[r.label for r in ex.regions] for ex in examples], dtype=np.int64)
        directives, substitutes, vtargets = mask_visual(labels, policy, rng_visual)
        vpos = np.array(sorted(vtargets.keys()), dtype=np.int64).reshape(-1, 2)
        vids = np.array([vtargets[tuple(p)] for p in vpos], dtype=np.int64)
        batch.num_regions = o
        batch.feats = feats
        batch.bboxes = bboxes
        batch.region_labels = labels
        batch.vis_directives = directives
        batch.vis_substitutes = substitutes
        batch.vis_target_pos = vpos
        batch.vis_target_ids = vids
    return batch
