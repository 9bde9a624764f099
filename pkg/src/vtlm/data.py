"""Triplet dataset records and line-oriented file I/O.

A triplet file is UTF-8 JSON lines: a one-line header
{"version", "D", "o", "label_vocab"} followed by one record per line
with fields {id, src, tgt, regions, entities}. Token fields hold
vocabulary ids; region features are float32 round-tripped exactly
through their decimal representation. The same format ingests real
precomputed detector features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


class EntitySpan(NamedTuple):
    stream: str  # "src" or "tgt"
    start: int   # token index, inclusive
    end: int     # token index, exclusive


@dataclass
class RegionFeature:
    """One detected region: pooled feature, normalised box, detector label."""

    feat: np.ndarray
    bbox: np.ndarray
    label: int

    def validate(self, feat_dim: int, label_vocab: int) -> None:
        if self.feat.shape != (feat_dim,):
            raise DataError(f"region feature dim {self.feat.shape} != ({feat_dim},)")
        if not np.all(np.isfinite(self.feat)):
            raise DataError("region feature contains non-finite values")
        x1, y1, x2, y2 = (float(v) for v in self.bbox)
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise DataError(f"invalid bbox {self.bbox}")
        if not (0 <= self.label < label_vocab):
            raise DataError(f"region label {self.label} out of range")

    def __eq__(self, other):
        return (
            isinstance(other, RegionFeature)
            and self.label == other.label
            and np.array_equal(self.feat, other.feat)
            and np.array_equal(self.bbox, other.bbox)
        )


@dataclass
class TripletExample:
    """One (source sentence, target sentence, region set) training unit."""

    id: str
    src_tokens: list[int]
    tgt_tokens: list[int]
    regions: list[RegionFeature]
    entity_spans: list[EntitySpan] = field(default_factory=list)

    def spans_for(self, stream: str) -> list[EntitySpan]:
        return [s for s in self.entity_spans if s.stream == stream]


def write_triplets(path, examples: list[TripletExample], feat_dim: int,
                   num_regions: int, label_vocab: int) -> None:
    header = {
        "version": FORMAT_VERSION,
        "D": feat_dim,
        "o": num_regions,
        "label_vocab": label_vocab,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            if len(ex.regions) != num_regions:
                raise DataError(f"example {ex.id}: expected {num_regions} regions")
            rec = {
                "id": ex.id,
                "src": [int(t) for t in ex.src_tokens],
                "tgt": [int(t) for t in ex.tgt_tokens],
                "regions": [
                    {
                        "label": int(r.label),
                        "bbox": [float(v) for v in r.bbox],
                        "feat": [float(v) for v in r.feat],
                    }
                    for r in ex.regions
                ],
                "entities": [
                    {"stream": s.stream, "start": s.start, "end": s.end}
                    for s in ex.entity_spans
                ],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_triplets(path, expect_feat_dim: int | None = None):
    """Read a triplet file; returns (examples, header)."""
    examples: list[TripletExample] = []
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        if not first:
            raise DataError(f"{path}: empty file")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: malformed header at line 1: {e}") from e
        for key in ("version", "D", "o", "label_vocab"):
            if key not in header:
                raise DataError(f"{path}: header missing field {key!r}")
        if header["version"] != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {header['version']}")
        if expect_feat_dim is not None and header["D"] != expect_feat_dim:
            raise DataError(
                f"{path}: feature dim {header['D']} does not match expected {expect_feat_dim}"
            )
        feat_dim, num_regions, label_vocab = header["D"], header["o"], header["label_vocab"]
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                regions = [
                    RegionFeature(
                        feat=np.asarray(r["feat"], dtype=np.float32),
                        bbox=np.asarray(r["bbox"], dtype=np.float32),
                        label=int(r["label"]),
                    )
                    for r in rec["regions"]
                ]
                ex = TripletExample(
                    id=rec["id"],
                    src_tokens=[int(t) for t in rec["src"]],
                    tgt_tokens=[int(t) for t in rec["tgt"]],
                    regions=regions,
                    entity_spans=[
                        EntitySpan(e["stream"], int(e["start"]), int(e["end"]))
                        for e in rec.get("entities", [])
                    ],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}: malformed record at line {line_no}: {e}") from e
            if not ex.src_tokens or not ex.tgt_tokens:
                raise DataError(f"{path}: empty sentence at line {line_no}")
            if len(ex.regions) != num_regions:
                raise DataError(
                    f"{path}: line {line_no} has {len(ex.regions)} regions, header says {num_regions}"
                )
            for r in ex.regions:
                r.validate(feat_dim, label_vocab)
            examples.append(ex)
    return examples, header
