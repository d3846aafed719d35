"""Byte-level privacy audit of a protocol message log.

Canary values are planted in the training inputs; the audit searches the raw
log for their little-endian f64 bit patterns. A clean run must never contain
one, because messages carry parameter tensors and integer metadata only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from brainfed import codec
from brainfed.codec import ProtocolMessage, iter_frames
from brainfed.synthdata import Corpus, canary_values, find_canaries


@dataclass
class AuditReport:
    frames: int
    bytes_scanned: int
    canaries: int
    matches: list[tuple[float, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.matches

    def lines(self) -> list[str]:
        out = [
            f"frames scanned: {self.frames}",
            f"bytes scanned: {self.bytes_scanned}",
            f"canary patterns: {self.canaries}",
            f"matches: {len(self.matches)}",
        ]
        out += [f"  canary {value!r} at byte offset {offset}" for value, offset in self.matches]
        out.append("PASS" if self.passed else "FAIL")
        return out


def patterns(values) -> dict[bytes, float]:
    return {struct.pack("<d", float(v)): float(v) for v in values}


def scan(data: bytes, values) -> list[tuple[float, int]]:
    """Every (value, offset) where a canary bit pattern occurs, at any alignment."""
    hits = []
    for pat, value in patterns(values).items():
        start = data.find(pat)
        while start != -1:
            hits.append((value, start))
            start = data.find(pat, start + 1)
    return sorted(hits, key=lambda h: h[1])


def corpus_canaries(corpus: Corpus) -> list[float]:
    """Canary values actually present in the corpus training inputs."""
    return sorted({v for _, _, v in find_canaries(corpus)})


def audit_log(data: bytes, values) -> AuditReport:
    frames = sum(1 for _ in iter_frames(data))
    values = list(values)
    return AuditReport(frames, len(data), len(values), scan(data, values))


def make_leaky_round(corpus: Corpus):
    """Negative control: honest rounds whose uploads also carry one raw training row.

    The row rides along as an extra tensor in the payload, so the coordinator
    still aggregates normally. Only for exercising the audit.
    """
    from brainfed.network import Layer, ParamSet
    from brainfed.protocol import client_round

    raw = {s.subject_id: s.train_inputs for s in corpus.subjects}

    def leaky_round(client, broadcast, cfg, epoch):
        client, frame, losses = client_round(client, broadcast, cfg, epoch)
        msg = ProtocolMessage.decode(frame)
        sets = codec.unpack_modalities(msg.payload)
        row = _row_with_canary(raw[client.subject_id])
        sets["leak"] = ParamSet([Layer("sample", row[None, :], np.zeros(1))])
        leaked = ProtocolMessage(msg.kind, msg.sender, msg.epoch, codec.pack_modalities(sets), msg.sample_count)
        return client, leaked.encode(), losses

    return leaky_round


def _row_with_canary(x: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(np.isin(x, canary_values(64)).any(axis=1))
    return x[rows[0] if rows.size else 0].copy()
