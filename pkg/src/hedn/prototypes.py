"""Per-domain prototype memory banks, EMA maintenance, cosine matching,
label propagation from a source bank to the target clusters, and the
prototype-vote predictor."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .clustering import NOISE, ClusterAssignment
from .diffmath import cosine_matrix
from .nets import EMBED_DIM, HednModel, embed, read_model, write_model

log = logging.getLogger(__name__)

NO_LABEL = -1


class EmptyBankError(ValueError):
    pass


class UnknownClusterError(KeyError):
    pass


@dataclass
class PrototypeBank:
    """Prototypes of one domain, one row per non-noise cluster, kept sorted
    by cluster id."""

    domain_id: int
    cluster_ids: np.ndarray
    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.cluster_ids = np.asarray(self.cluster_ids, dtype=np.int64)
        vectors = np.array(self.vectors, dtype=np.float64)
        width = vectors.shape[-1] if vectors.ndim == 2 else EMBED_DIM
        self.vectors = vectors.reshape(len(self.cluster_ids), width if vectors.size == 0 else -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        order = np.argsort(self.cluster_ids, kind="stable")
        self.cluster_ids, self.vectors, self.labels = (
            self.cluster_ids[order], self.vectors[order], self.labels[order])
        self._index = {int(c): i for i, c in enumerate(self.cluster_ids)}

    def __len__(self):
        return len(self.cluster_ids)

    def row(self, cluster_id: int) -> int:
        try:
            return self._index[int(cluster_id)]
        except KeyError:
            raise UnknownClusterError(f"domain {self.domain_id} has no cluster {cluster_id}") from None

    def vector(self, cluster_id: int) -> np.ndarray:
        return self.vectors[self.row(cluster_id)]

    def label(self, cluster_id: int) -> int:
        return int(self.labels[self.row(cluster_id)])

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.domain_id, self.cluster_ids.copy(), self.vectors.copy(),
                             self.labels.copy())


@dataclass
class MemoryBanks:
    source_banks: list[PrototypeBank]
    target_bank: PrototypeBank

    def all(self) -> list[PrototypeBank]:
        return [*self.source_banks, self.target_bank]

    def copy(self) -> "MemoryBanks":
        return MemoryBanks([b.copy() for b in self.source_banks], self.target_bank.copy())


def majority_label(labels) -> int:
    """Most frequent label; ties go to the smallest id."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels - labels.min())
    return int(np.argmax(counts) + labels.min())


def build_bank(domain_id: int, embeddings: np.ndarray, assignment: ClusterAssignment,
               class_labels=None) -> PrototypeBank:
    ids, vectors, labels = [], [], []
    for c in range(assignment.n_clusters):
        members = assignment.labels == c
        if not members.any():
            continue
        ids.append(c)
        vectors.append(embeddings[members].mean(axis=0))
        if class_labels is None:
            labels.append(NO_LABEL)
        else:
            member_labels = np.asarray(class_labels)[members]
            lab = majority_label(member_labels)
            labels.append(lab)
            purity = float(np.mean(member_labels == lab))
            log.debug("domain %d cluster %d: label %d purity %.3f", domain_id, c, lab, purity)
    return PrototypeBank(domain_id, np.array(ids, dtype=np.int64),
                         np.array(vectors).reshape(len(ids), embeddings.shape[1]),
                         np.array(labels, dtype=np.int64))


def init_banks(sources, target, source_assignments, target_assignment,
               model: HednModel) -> MemoryBanks:
    """Initial prototypes are eval-mode cluster centroids of ``g(f(x))``."""
    banks = []
    for ds, asg in zip(sources, source_assignments):
        banks.append(build_bank(ds.domain_id, embed(model, ds.features), asg, ds.labels))
    target_bank = build_bank(target.domain_id, embed(model, target.features), target_assignment)
    return MemoryBanks(banks, target_bank)


def batch_prototype(batch_embeddings, batch_cluster_ids, cluster_id: int) -> np.ndarray | None:
    """Mean embedding of batch rows in ``cluster_id``; ``None`` when the cluster
    is absent from the batch."""
    members = np.asarray(batch_cluster_ids) == cluster_id
    if cluster_id == NOISE or not members.any():
        return None
    return np.asarray(batch_embeddings)[members].mean(axis=0)


def ema_update(bank: PrototypeBank, cluster_id: int, instant, momentum: float) -> None:
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    i = bank.row(cluster_id)
    bank.vectors[i] = momentum * bank.vectors[i] + (1.0 - momentum) * np.asarray(instant)


def update_bank_from_batch(bank: PrototypeBank, embeddings, cluster_ids, momentum: float) -> list[int]:
    """EMA-update every cluster present in the batch; returns the ids touched."""
    touched = []
    for c in np.unique(cluster_ids):
        if c == NOISE or int(c) not in bank._index:
            continue
        ema_update(bank, int(c), batch_prototype(embeddings, cluster_ids, int(c)), momentum)
        touched.append(int(c))
    return touched


def _nearest_rows(queries: np.ndarray, bank: PrototypeBank) -> tuple[np.ndarray, np.ndarray]:
    if len(bank) == 0:
        raise EmptyBankError(f"domain {bank.domain_id} has an empty prototype bank")
    sims = cosine_matrix(queries, bank.vectors)
    # argmax returns the first maximum; rows are sorted by cluster id
    rows = np.argmax(sims, axis=1)
    return rows, sims[np.arange(len(rows)), rows]


def match_prototype(query, bank: PrototypeBank) -> tuple[int, float]:
    rows, sims = _nearest_rows(np.atleast_2d(np.asarray(query, dtype=np.float64)), bank)
    return int(bank.cluster_ids[rows[0]]), float(sims[0])


def match_batch(queries, bank: PrototypeBank) -> np.ndarray:
    """Cluster id of the nearest prototype for each query row."""
    rows, _ = _nearest_rows(np.atleast_2d(queries), bank)
    return bank.cluster_ids[rows]


def propagate_labels(banks: MemoryBanks, easy_domain: int) -> dict[int, int]:
    """Each target cluster inherits the label of its most similar prototype in
    source bank ``easy_domain`` (an index into ``banks.source_banks``)."""
    source = banks.source_banks[easy_domain]
    target = banks.target_bank
    if len(target) == 0:
        raise EmptyBankError("target prototype bank is empty")
    rows, _ = _nearest_rows(target.vectors, source)
    return {int(c): int(source.labels[r]) for c, r in zip(target.cluster_ids, rows)}


def pseudo_labels(banks: MemoryBanks, easy_domain: int, target_embeddings) -> np.ndarray:
    """Sample -> nearest target cluster -> label propagated from the easy bank."""
    mapping = propagate_labels(banks, easy_domain)
    clusters = match_batch(target_embeddings, banks.target_bank)
    return np.array([mapping[int(c)] for c in clusters], dtype=np.int64)


def vote(labels) -> int:
    return majority_label(labels)


def cluster_votes(banks: MemoryBanks) -> dict[int, int]:
    """Voted class label for every target cluster: each source bank
    contributes the label of its prototype nearest the target prototype."""
    target = banks.target_bank
    if len(target) == 0:
        raise EmptyBankError("target prototype bank is empty")
    collected = []
    for bank in banks.source_banks:
        rows, _ = _nearest_rows(target.vectors, bank)
        collected.append(bank.labels[rows])
    collected = np.stack(collected, axis=1)
    return {int(c): vote(col) for c, col in zip(target.cluster_ids, collected)}


def predict_embeddings(banks: MemoryBanks, z) -> np.ndarray:
    votes = cluster_votes(banks)
    clusters = match_batch(z, banks.target_bank)
    return np.array([votes[int(c)] for c in clusters], dtype=np.int64)


def predict_batch(banks: MemoryBanks, model: HednModel, x) -> np.ndarray:
    return predict_embeddings(banks, embed(model, np.atleast_2d(x)))


def predict(banks: MemoryBanks, model: HednModel, x) -> int:
    return int(predict_batch(banks, model, np.asarray(x, dtype=np.float64)[None, :])[0])


# --------------------------------------------------------------------------
# Serialisation (appended to the model checkpoint)
# --------------------------------------------------------------------------


def write_banks(fh: BinaryIO, banks: MemoryBanks | None) -> None:
    """A zero bank count marks a checkpoint trained without the easy branch."""
    all_banks = [] if banks is None else banks.all()
    fh.write(struct.pack("<I", len(all_banks)))
    for bank in all_banks:
        fh.write(struct.pack("<iI", bank.domain_id, len(bank)))
        for cid, lab, vec in zip(bank.cluster_ids, bank.labels, bank.vectors):
            fh.write(struct.pack("<Ii", int(cid), int(lab)))
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def _unpack(fh: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise ValueError("truncated prototype bank section")
    return struct.unpack(fmt, raw)


def read_banks(fh: BinaryIO) -> MemoryBanks | None:
    (n_banks,) = _unpack(fh, "<I")
    if n_banks == 0:
        return None
    if n_banks < 2:
        raise ValueError(f"checkpoint holds {n_banks} banks, need at least 2")
    banks = []
    for _ in range(n_banks):
        domain_id, count = _unpack(fh, "<iI")
        ids, labels, vecs = [], [], []
        for _ in range(count):
            cid, lab = _unpack(fh, "<Ii")
            raw = fh.read(EMBED_DIM * 8)
            if len(raw) != EMBED_DIM * 8:
                raise ValueError("truncated prototype bank")
            ids.append(cid)
            labels.append(lab)
            vecs.append(np.frombuffer(raw, dtype="<f8"))
        banks.append(PrototypeBank(domain_id, np.array(ids, dtype=np.int64),
                                   np.array(vecs).reshape(count, EMBED_DIM),
                                   np.array(labels, dtype=np.int64)))
    return MemoryBanks(banks[:-1], banks[-1])


def save_checkpoint(path, model: HednModel, banks: MemoryBanks | None) -> None:
    with open(path, "wb") as fh:
        write_model(fh, model)
        write_banks(fh, banks)


def load_checkpoint(path) -> tuple[HednModel, MemoryBanks | None]:
    with open(path, "rb") as fh:
        model = read_model(fh)
        banks = read_banks(fh)
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint")
    return model, banks
