"""Federated learning rounds over denoiser parameters and codebooks.

Clients train locally (full-batch gradient descent on the diffusion loss)
and ship parameter vectors; the server aggregates with sample-count-weighted
averaging. Codebooks federate through per-centroid sufficient statistics
(sums and counts), one k-means step per round. No wire payload ever carries
a raw sample: payload types are restricted to parameters, centroid sums and
counts by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generator import Conditioning, DenoiserParams, NoiseSchedule, training_loss_batch
from .semantics import Codebook


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: np.ndarray  # flat parameter vector
    n_k: int

    def __post_init__(self) -> None:
        if self.n_k < 1:
            raise ValueError("n_k must be >= 1")


@dataclass(frozen=True)
class FLParamsPayload:
    """Wire payload for a parameter exchange: parameters only."""

    params: np.ndarray


@dataclass(frozen=True)
class CodebookStatsPayload:
    """Wire payload for a codebook round: per-centroid sums and counts."""

    sums: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class FederationRound:
    index: int
    participants: tuple[int, ...]
    params_before: np.ndarray
    params_after: np.ndarray
    bytes_exchanged: int

    @staticmethod
    def wire_bytes(n_participants: int, param_count: int) -> int:
        # each participant downloads and uploads the full float32 vector
        return n_participants * (4 * param_count) * 2


def local_update(
    client_id: int,
    params: DenoiserParams,
    dataset: list[tuple[np.ndarray, Conditioning]],
    sched: NoiseSchedule,
    eta: float,
    epochs: int,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Epochs of full-batch gradient descent on the local diffusion loss."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not dataset:
        raise ValueError("local dataset must be non-empty")
    local = params.copy()
    images = np.stack([img for img, _ in dataset])
    conds = [c for _, c in dataset]
    for _ in range(epochs):
        _, grad = training_loss_batch(local, images, conds, sched, rng)
        if not np.all(np.isfinite(grad)):
            raise ValueError("non-finite gradient in local update")
        local.flat -= eta * grad
    return ClientUpdate(client_id=client_id, params=local.flat, n_k=len(dataset))


def fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-count-weighted parameter average.

    Updates are processed in client_id order with compensated summation, so
    the result is bitwise independent of the input ordering.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    length = updates[0].params.shape
    for u in updates:
        if u.params.shape != length:
            raise ValueError("parameter length mismatch across updates")
    n = sum(u.n_k for u in updates)
    acc = np.zeros(length, dtype=np.float64)
    comp = np.zeros(length, dtype=np.float64)
    for u in sorted(updates, key=lambda u: u.client_id):
        term = (u.n_k / n) * u.params
        y = term - comp
        t = acc + y
        comp = (t - acc) - y
        acc = t
    return acc


def partition_noniid(
    dataset: list[tuple[object, int]],
    n_clients: int,
    skew: float,
    rng: np.random.Generator,
) -> list[list[tuple[object, int]]]:
    """Split (item, label) pairs across clients with tunable label skew.

    skew 0 is a shuffled even split; skew 1 routes every sample to the
    client owning its class (classes dealt round-robin); in between, each
    sample flips a Bernoulli(skew) coin for class-driven routing, the rest
    are dealt evenly.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > len(dataset):
        raise ValueError("more clients than samples")
    if not (0.0 <= skew <= 1.0):
        raise ValueError("skew must lie in [0, 1]")
    labels = sorted({lab for _, lab in dataset})
    owner = {lab: i % n_clients for i, lab in enumerate(labels)}
    clients: list[list[tuple[object, int]]] = [[] for _ in range(n_clients)]
    coins = rng.random(len(dataset)) < skew
    pool: list[int] = []
    for i, (item, lab) in enumerate(dataset):
        if coins[i]:
            clients[owner[lab]].append((item, lab))
        else:
            pool.append(i)
    order = rng.permutation(len(pool))
    for j, k in enumerate(order):
        item, lab = dataset[pool[k]]
        clients[j % n_clients].append((item, lab))
    return clients


def client_codebook_stats(
    codebook: Codebook, embeddings: np.ndarray
) -> CodebookStatsPayload:
    """Per-centroid sums/counts of a client's embeddings (nearest centroid)."""
    if embeddings.ndim != 2 or embeddings.shape[1] != codebook.dim:
        raise ValueError("embedding dimension mismatch")
    k = codebook.size
    sums = np.zeros((k, codebook.dim), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    if embeddings.shape[0]:
        d2 = (
            np.sum(embeddings**2, axis=1)[:, None]
            - 2.0 * embeddings @ codebook.centroids.T
            + np.sum(codebook.centroids**2, axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        np.add.at(sums, assign, embeddings)
        np.add.at(counts, assign, 1)
    return CodebookStatsPayload(sums=sums, counts=counts)


def fed_codebook_round(
    codebook: Codebook, client_datasets: list[np.ndarray]
) -> Codebook:
    """One federated k-means step: centroids move to the weighted mean of
    all client points assigned to them; unassigned centroids stay put."""
    if codebook.size == 0:
        raise ValueError("codebook must be non-empty")
    total_sums = np.zeros_like(codebook.centroids)
    total_counts = np.zeros(codebook.size, dtype=np.int64)
    for emb in client_datasets:
        stats = client_codebook_stats(codebook, np.asarray(emb, dtype=np.float64))
        total_sums += stats.sums
        total_counts += stats.counts
    new = codebook.centroids.copy()
    hit = total_counts > 0
    new[hit] = total_sums[hit] / total_counts[hit, None]
    return Codebook(new)


def fedavg_round(
    index: int,
    params: DenoiserParams,
    client_datasets: list[list[tuple[np.ndarray, Conditioning]]],
    sched: NoiseSchedule,
    eta: float,
    epochs: int,
    rng: np.random.Generator,
) -> tuple[DenoiserParams, FederationRound]:
    """Run local updates for every non-empty client and aggregate."""
    updates = []
    child_rngs = rng.spawn(len(client_datasets))
    for cid, (data, crng) in enumerate(zip(client_datasets, child_rngs)):
        if not data:
            continue
        updates.append(
            local_update(cid, params, data, sched, eta, epochs, crng)
        )
    if not updates:
        return params, FederationRound(
            index, (), params.flat.copy(), params.flat.copy(), 0
        )
    before = params.flat.copy()
    merged = fedavg(updates)
    out = DenoiserParams(params.arch, merged)
    rnd = FederationRound(
        index=index,
        participants=tuple(u.client_id for u in updates),
        params_before=before,
        params_after=merged.copy(),
        bytes_exchanged=FederationRound.wire_bytes(len(updates), merged.size),
    )
    return out, rnd
