"""Entropies, Slepian-Wolf region tests, binned source coding with decoder
side information, and hyperdimensional symbol coding.

The binning codec realizes distributed coding in the lossless regime: the
encoder maps a source block to a bin index; the decoder searches the bin
for the block that maximizes joint likelihood with its side-information
block. For binary alphabets the bins are cosets of a seeded random linear
code screened for large kernel minimum distance, which keeps competing
candidates far apart in Hamming space. Non-binary alphabets fall back to a
seeded multiplicative hash over the packed block.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .seeds import rng_for

_LINEAR_SCREEN_DRAWS = 64
_EXHAUSTIVE_KEY_LIMIT = 1 << 18
_FALLBACK_CANDIDATE_CAP = 4096


# --------------------------------------------------------------------------
# entropies and the Slepian-Wolf region
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class JointHistogram:
    counts: np.ndarray  # (|X|, |Y|) non-negative integers

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", c)
        if c.ndim != 2:
            raise ValueError("counts must be a 2-D table")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        if c.sum() < 1:
            raise ValueError("histogram needs at least one observation")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def alphabet_x(self) -> int:
        return int(self.counts.shape[0])

    @property
    def alphabet_y(self) -> int:
        return int(self.counts.shape[1])

    @classmethod
    def from_samples(cls, xs, ys, nx: int, ny: int) -> "JointHistogram":
        counts = np.zeros((nx, ny), dtype=np.int64)
        np.add.at(counts, (np.asarray(xs), np.asarray(ys)), 1)
        return cls(counts)


@dataclass(frozen=True)
class EntropyReport:
    h_x: float
    h_y: float
    h_x_given_y: float
    h_y_given_x: float
    h_xy: float
    i_xy: float


def _plugin_entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def empirical_entropies(hist: JointHistogram) -> EntropyReport:
    """Plug-in entropies in bits per symbol, with 0 log 0 = 0."""
    joint = hist.counts / hist.n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    h_x = _plugin_entropy(px)
    h_y = _plugin_entropy(py)
    h_xy = _plugin_entropy(joint.ravel())
    return EntropyReport(
        h_x=h_x,
        h_y=h_y,
        h_x_given_y=h_xy - h_y,
        h_y_given_x=h_xy - h_x,
        h_xy=h_xy,
        i_xy=h_x + h_y - h_xy,
    )


def in_slepian_wolf_region(
    r_x: float, r_y: float, report: EntropyReport, tol: float = 1e-9
) -> tuple[bool, list[str]]:
    """Check the three achievability inequalities; list any that fail."""
    if r_x < 0 or r_y < 0:
        raise ValueError("rates must be non-negative")
    violated = []
    if r_x < report.h_x_given_y - tol:
        violated.append("R_X")
    if r_y < report.h_y_given_x - tol:
        violated.append("R_Y")
    if r_x + r_y < report.h_xy - tol:
        violated.append("R_X+R_Y")
    return (not violated, violated)


# --------------------------------------------------------------------------
# binned coding with side information
# --------------------------------------------------------------------------

def _popcount(arr: np.ndarray) -> np.ndarray:
    v = arr.astype(np.uint64)
    out = np.zeros_like(v)
    while np.any(v):
        out += v & 1
        v >>= np.uint64(1)
    return out


def _gf2_rank(rows: np.ndarray, width: int) -> int:
    r = 0
    rows = [int(x) for x in rows]
    for col in range(width):
        pivot = None
        for i in range(r, len(rows)):
            if rows[i] >> col & 1:
                pivot = i
                break
        if pivot is None:
            continue
        rows[r], rows[pivot] = rows[pivot], rows[r]
        for i in range(len(rows)):
            if i != r and (rows[i] >> col & 1):
                rows[i] ^= rows[r]
        r += 1
        if r == len(rows):
            break
    return r


@dataclass
class BinningCode:
    """Seeded deterministic binning of length-L source blocks.

    rate is in bits per symbol; bins per block = 2^(rate * L) rounded (for
    binary alphabets, rounded to a power of two: the parity rank).
    """

    rate: float
    block_len: int
    alphabet: int = 2
    seed: int = 0
    _rows: np.ndarray | None = field(default=None, repr=False)
    _kernel: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.block_len < 1:
            raise ValueError("block_len must be >= 1")
        if self.alphabet < 2:
            raise ValueError("alphabet must be >= 2")
        if self.rate < 0:
            raise ValueError("rate must be non-negative")
        total_bits = self.rate * self.block_len
        if self.alphabet == 2:
            rank = min(int(round(total_bits)), self.block_len)
            self.n_bins = 1 << rank
            self._rank = rank
            if rank > 0:
                self._rows = _screened_parity_rows(
                    rank, self.block_len, self.seed
                )
            else:
                self._rows = np.zeros(0, dtype=np.uint64)
        else:
            cap = self.alphabet**self.block_len
            self.n_bins = min(max(1, round(2.0**total_bits)), cap)
            self._rank = None

    # -- packing -----------------------------------------------------------
    def pack(self, block: np.ndarray) -> int:
        block = np.asarray(block)
        if block.shape != (self.block_len,):
            raise ValueError(f"block must have length {self.block_len}")
        if np.any((block < 0) | (block >= self.alphabet)):
            raise ValueError("symbol outside the alphabet")
        key = 0
        for s in block[::-1]:
            key = key * self.alphabet + int(s)
        return key

    def unpack(self, key: int) -> np.ndarray:
        out = np.empty(self.block_len, dtype=np.int64)
        for i in range(self.block_len):
            out[i] = key % self.alphabet
            key //= self.alphabet
        return out

    # -- binning -----------------------------------------------------------
    def bin_of_key(self, key) -> np.ndarray | int:
        if self.alphabet == 2:
            keys = np.asarray(key, dtype=np.uint64)
            b = np.zeros_like(keys)
            for i, row in enumerate(self._rows):
                bit = _popcount(keys & row) & np.uint64(1)
                b |= bit << np.uint64(i)
            return b if b.ndim else int(b)
        keys = np.asarray(key, dtype=np.uint64)
        h = (keys ^ np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)) * np.uint64(
            0x9E3779B97F4A7C15
        )
        h ^= h >> np.uint64(29)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(32)
        b = h % np.uint64(self.n_bins)
        return b if b.ndim else int(b)

    def kernel_keys(self) -> np.ndarray:
        """All packed blocks in bin(0)'s coset (binary codes only)."""
        if self.alphabet != 2:
            raise ValueError("kernel enumeration requires a binary alphabet")
        if self._kernel is None:
            keys = np.arange(1 << self.block_len, dtype=np.uint64)
            bins = self.bin_of_key(keys)
            self._kernel = keys[bins == 0]
        return self._kernel


def _screened_parity_rows(rank: int, width: int, seed: int) -> np.ndarray:
    """Full-rank random parity rows, best kernel min distance over a fixed
    number of seeded draws."""
    best_rows = None
    best_d = -1
    for trial in range(_LINEAR_SCREEN_DRAWS):
        rng = rng_for(seed, "wz-parity", trial)
        for _ in range(64):
            rows = np.zeros(rank, dtype=np.uint64)
            for i in range(rank):
                bits = rng.integers(0, 2, size=width)
                rows[i] = np.uint64(
                    int("".join("1" if b else "0" for b in bits[::-1]) or "0", 2)
                )
            if _gf2_rank(rows, width) == rank:
                break
        else:
            continue
        dmin = _kernel_min_distance(rows, rank, width)
        if dmin > best_d:
            best_d = dmin
            best_rows = rows
    if best_rows is None:
        raise RuntimeError("failed to draw full-rank parity rows")
    return best_rows


def _kernel_min_distance(rows: np.ndarray, rank: int, width: int) -> int:
    kdim = width - rank
    if kdim > 20:
        return 0  # kernel too large to enumerate; skip screening
    # nullspace basis over GF(2) via elimination on the transposed system
    basis = _gf2_nullspace(rows, width)
    if not basis:
        return width + 1
    best = width + 1
    for m in range(1, 1 << len(basis)):
        v = 0
        mm = m
        i = 0
        while mm:
            if mm & 1:
                v ^= basis[i]
            mm >>= 1
            i += 1
        if v:
            best = min(best, bin(v).count("1"))
    return best


def _gf2_nullspace(rows: np.ndarray, width: int) -> list[int]:
    rows = [int(r) for r in rows]
    pivots: dict[int, int] = {}
    reduced: list[int] = []
    for row in rows:
        r = row
        for col, rr in pivots.items():
            if r >> col & 1:
                r ^= rr
        if r:
            col = (r & -r).bit_length() - 1
            pivots[col] = r
            reduced.append(r)
    basis = []
    pivot_cols = set(pivots)
    for free in range(width):
        if free in pivot_cols:
            continue
        v = 1 << free
        for col in sorted(pivot_cols, reverse=True):
            rr = pivots[col]
            if _dot2(rr, v):
                v ^= 1 << col
        basis.append(v)
    return basis


def _dot2(a: int, b: int) -> int:
    return bin(a & b).count("1") & 1


def wz_encode(x_block: np.ndarray, code: BinningCode) -> int:
    """Bin index of a source block (deterministic per code seed)."""
    return int(code.bin_of_key(code.pack(x_block)))


def wz_decode(
    bin_index: int,
    y_block: np.ndarray,
    code: BinningCode,
    joint: JointHistogram,
) -> np.ndarray | None:
    """Most-likely block in the bin given the side-information block.

    Exhaustive over the bin when the key space is small enough, otherwise a
    capped likelihood-ordered candidate sweep. Returns None when every
    candidate has zero joint probability (decoding failure).
    """
    y_block = np.asarray(y_block)
    if y_block.shape != (code.block_len,):
        raise ValueError("side-information block length mismatch")
    if joint.alphabet_x != code.alphabet:
        raise ValueError("joint histogram does not match the code alphabet")
    with np.errstate(divide="ignore"):
        logp = np.log(joint.counts / joint.n)

    total_keys = code.alphabet**code.block_len
    if total_keys <= _EXHAUSTIVE_KEY_LIMIT:
        keys = np.arange(total_keys, dtype=np.uint64)
        bins = code.bin_of_key(keys)
        cand_keys = keys[bins == bin_index]
        if cand_keys.size == 0:
            return None
        # unpack all candidates vectorized (mixed radix)
        syms = np.empty((cand_keys.size, code.block_len), dtype=np.int64)
        rem = cand_keys.astype(np.int64).copy()
        for i in range(code.block_len):
            syms[:, i] = rem % code.alphabet
            rem //= code.alphabet
        scores = logp[syms, np.asarray(y_block)[None, :]].sum(axis=1)
        best = int(np.argmax(scores))  # ties: lowest key (keys ascend)
        if not np.isfinite(scores[best]):
            return None
        return syms[best]

    # fallback: lazy best-first sweep of blocks in decreasing joint
    # likelihood with y, keeping the first cap's worth that land in the bin
    prefs = []  # per position: symbols sorted by decreasing log-likelihood
    for y in y_block:
        col = logp[:, int(y)]
        prefs.append(sorted(range(code.alphabet), key=lambda s: (-col[s], s)))
    pref_scores = np.array(
        [[logp[s, int(y)] for s in prefs[i]] for i, y in enumerate(y_block)]
    )
    start = (0,) * code.block_len
    heap = [(-float(pref_scores[:, 0].sum()), start)]
    seen = {start}
    best_key = None
    best_score = -math.inf
    visited = 0
    while heap and visited < _FALLBACK_CANDIDATE_CAP:
        neg, ranks = heapq.heappop(heap)
        visited += 1
        score = -neg
        if not math.isfinite(score):
            break
        cand = np.array(
            [prefs[i][r] for i, r in enumerate(ranks)], dtype=np.int64
        )
        key = code.pack(cand)
        if int(code.bin_of_key(key)) == bin_index:
            if score > best_score or (score == best_score and key < best_key):
                best_score = score
                best_key = key
        for i in range(code.block_len):
            if ranks[i] + 1 < code.alphabet:
                nxt = ranks[:i] + (ranks[i] + 1,) + ranks[i + 1 :]
                if nxt not in seen:
                    seen.add(nxt)
                    delta = (
                        pref_scores[i, ranks[i] + 1] - pref_scores[i, ranks[i]]
                    )
                    heapq.heappush(heap, (neg - float(delta), nxt))
    if best_key is None or not math.isfinite(best_score):
        return None
    return code.unpack(best_key)


def dsbs_histogram(p: float, n: int = 1_000_000) -> JointHistogram:
    """Idealized doubly symmetric binary source histogram with crossover p."""
    both = round(n * (1 - p) / 2)
    cross = round(n * p / 2)
    return JointHistogram(np.array([[both, cross], [cross, both]]))


def binary_entropy(p: float) -> float:
    if p <= 0 or p >= 1:
        return 0.0
    return float(-p * math.log2(p) - (1 - p) * math.log2(1 - p))


# --------------------------------------------------------------------------
# hyperdimensional symbol coding
# --------------------------------------------------------------------------

class HdDictionary:
    """Seeded bipolar codebook: symbol -> {-1, +1}^D.

    Distinct symbols are near-orthogonal; the builder redraws (still
    deterministically) any vector whose sample correlation with an earlier
    one exceeds 5 / sqrt(D).
    """

    def __init__(self, symbols: list, dim: int = 10_000, seed: int = 0):
        if dim < 1:
            raise ValueError("dimension must be positive")
        if len(set(symbols)) != len(symbols):
            raise ValueError("symbols must be unique")
        self.dim = dim
        self.seed = seed
        self.symbols = list(symbols)
        self._vectors = np.empty((len(symbols), dim), dtype=np.int8)
        limit = 5.0 / math.sqrt(dim)
        for i, _sym in enumerate(self.symbols):
            for attempt in range(64):
                rng = rng_for(seed, "hd", i, attempt)
                v = (rng.integers(0, 2, size=dim, dtype=np.int8) * 2 - 1).astype(
                    np.int8
                )
                if i == 0:
                    break
                rho = (self._vectors[:i] @ v.astype(np.int64)) / dim
                if np.max(np.abs(rho)) <= limit:
                    break
            else:
                raise RuntimeError("could not draw a near-orthogonal vector")
            self._vectors[i] = v
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def vector(self, symbol) -> np.ndarray:
        if symbol not in self._index:
            raise KeyError(f"unknown symbol {symbol!r}")
        return self._vectors[self._index[symbol]].copy()


def hd_encode(symbol, dictionary: HdDictionary) -> np.ndarray:
    """The symbol's bipolar vector."""
    return dictionary.vector(symbol)


def hd_decode(noisy: np.ndarray, dictionary: HdDictionary):
    """Nearest symbol by inner product plus the normalized margin."""
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.shape != (dictionary.dim,):
        raise ValueError("vector dimension mismatch")
    scores = dictionary._vectors.astype(np.float64) @ noisy
    order = np.argsort(-scores, kind="stable")
    best = order[0]
    margin = (
        (scores[best] - scores[order[1]]) / dictionary.dim
        if len(order) > 1
        else scores[best] / dictionary.dim
    )
    return dictionary.symbols[int(best)], float(margin)
