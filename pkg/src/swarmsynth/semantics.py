"""Semantic tokens, byte-exact messages, fusion and codebook quantization.

A semantic token is the quantized form of one detection: class id, centroid
at 1/16-voxel resolution, per-axis extent in whole voxels (saturating at
255) and an 8-bit confidence. Messages carry tokens plus reference poses in
a fixed little-endian wire format guarded by CRC-32; the encoded size is
exactly 18 + 12 * n_tokens + 28 * n_poses bytes.

Poses on the wire use float32 components. Messages therefore store poses as
WirePose value tuples that are exactly representable in float32; the
`pose()` accessor renormalizes the quaternion when a full-precision Pose is
needed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, normalize_quat
from .seeds import rng_for
from .world import Detection, Zone

MESSAGE_MAGIC = b"SM"
MESSAGE_VERSION = 1
POSITION_SCALE = 16  # fixed-point: 1/16 voxel
MERGE_RADIUS = 1.5  # voxels; token dedup distance in fuse()
MATCH_RADIUS = 2.0  # voxels; detection matching distance for distortion
RELEVANCE_THRESHOLD = 0.5
SUMMARY_MAGIC = b"LS"
SUMMARY_BYTE_BUDGET = 2048
SUMMARY_PROJECTIONS = 16
TOKEN_BYTES = 12
POSE_BYTES = 28
HEADER_BYTES = 10  # magic, version, flags, goal_tag, zone_id, reserved
CRC_BYTES = 4


class MessageError(ValueError):
    """Base class for message decoding failures."""


class BadMagicError(MessageError):
    pass


class BadVersionError(MessageError):
    pass


class TruncatedError(MessageError):
    pass


class ChecksumError(MessageError):
    pass


@dataclass(frozen=True, order=True)
class SemanticToken:
    class_id: int
    position_q: tuple[int, int, int]
    extent_q: tuple[int, int, int]
    confidence_q: int

    def __post_init__(self) -> None:
        if not (0 <= self.class_id <= 0xFFFF):
            raise ValueError("class_id must fit u16")
        if any(not (0 <= q <= 0xFFFF) for q in self.position_q):
            raise ValueError("position_q must fit u16")
        if any(not (0 <= q <= 0xFF) for q in self.extent_q):
            raise ValueError("extent_q must fit u8")
        if not (0 <= self.confidence_q <= 0xFF):
            raise ValueError("confidence_q must fit u8")

    def position(self) -> np.ndarray:
        return np.asarray(self.position_q, dtype=np.float64) / POSITION_SCALE

    def extent(self) -> np.ndarray:
        return np.asarray(self.extent_q, dtype=np.float64)

    def confidence(self) -> float:
        return self.confidence_q / 255.0


def quantize_detection(det: Detection) -> SemanticToken:
    pos_q = tuple(
        int(np.clip(round(c * POSITION_SCALE), 0, 0xFFFF)) for c in det.centroid
    )
    ext_q = tuple(int(np.clip(round(e), 0, 0xFF)) for e in det.extent)
    conf_q = int(np.clip(round(det.confidence * 255.0), 0, 0xFF))
    return SemanticToken(det.class_id, pos_q, ext_q, conf_q)


def token_to_detection(tok: SemanticToken) -> Detection:
    return Detection(
        class_id=tok.class_id,
        centroid=tuple(tok.position().tolist()),
        extent=tuple(np.maximum(tok.extent(), 0.5).tolist()),
        confidence=tok.confidence(),
    )


@dataclass(frozen=True)
class WirePose:
    """Pose snapshot at float32 wire precision."""

    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]

    @classmethod
    def from_pose(cls, pose: Pose) -> "WirePose":
        pos = tuple(float(np.float32(v)) for v in pose.position)
        quat = tuple(float(np.float32(v)) for v in pose.orientation)
        return cls(pos, quat)

    def pose(self) -> Pose:
        return Pose(self.position, normalize_quat(self.orientation))


@dataclass
class SemanticMessage:
    zone_id: int
    tokens: list[SemanticToken] = field(default_factory=list)
    poses: list[WirePose] = field(default_factory=list)
    goal_tag: int = 0  # 0 = none

    def __post_init__(self) -> None:
        if not (0 <= self.zone_id <= 0xFFFF):
            raise ValueError("zone_id must fit u16")
        if not (0 <= self.goal_tag <= 0xFFFF):
            raise ValueError("goal_tag must fit u16")
        self.poses = [
            p if isinstance(p, WirePose) else WirePose.from_pose(p)
            for p in self.poses
        ]

    def encoded_size(self) -> int:
        return message_size(len(self.tokens), len(self.poses))


def message_size(n_tokens: int, n_poses: int) -> int:
    return HEADER_BYTES + 2 + TOKEN_BYTES * n_tokens + 2 + POSE_BYTES * n_poses + CRC_BYTES


def encode_message(msg: SemanticMessage) -> bytes:
    if len(msg.tokens) > 0xFFFF or len(msg.poses) > 0xFFFF:
        raise ValueError("token/pose count overflows u16")
    out = bytearray()
    out += MESSAGE_MAGIC
    out += struct.pack("<BBHHH", MESSAGE_VERSION, 0, msg.goal_tag, msg.zone_id, 0)
    out += struct.pack("<H", len(msg.tokens))
    for t in msg.tokens:
        out += struct.pack(
            "<H3H3BB", t.class_id, *t.position_q, *t.extent_q, t.confidence_q
        )
    out += struct.pack("<H", len(msg.poses))
    for p in msg.poses:
        out += struct.pack("<3f4f", *p.position, *p.orientation)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    assert len(out) == msg.encoded_size()
    return bytes(out)


def decode_message(data: bytes) -> SemanticMessage:
    if len(data) < HEADER_BYTES:
        raise TruncatedError("message shorter than its header")
    if data[:2] != MESSAGE_MAGIC:
        raise BadMagicError(f"bad magic {data[:2]!r}")
    version, _flags, goal_tag, zone_id, _reserved = struct.unpack(
        "<BBHHH", data[2:10]
    )
    if version != MESSAGE_VERSION:
        raise BadVersionError(f"unsupported version {version}")
    off = HEADER_BYTES

    def need(n: int) -> None:
        if off + n > len(data):
            raise TruncatedError("message truncated")

    need(2)
    (n_tokens,) = struct.unpack_from("<H", data, off)
    off += 2
    need(TOKEN_BYTES * n_tokens)
    tokens = []
    for _ in range(n_tokens):
        vals = struct.unpack_from("<H3H3BB", data, off)
        tokens.append(
            SemanticToken(vals[0], tuple(vals[1:4]), tuple(vals[4:7]), vals[7])
        )
        off += TOKEN_BYTES
    need(2)
    (n_poses,) = struct.unpack_from("<H", data, off)
    off += 2
    need(POSE_BYTES * n_poses)
    poses = []
    for _ in range(n_poses):
        vals = struct.unpack_from("<3f4f", data, off)
        poses.append(WirePose(tuple(vals[:3]), tuple(vals[3:])))
        off += POSE_BYTES
    need(CRC_BYTES)
    (crc,) = struct.unpack_from("<I", data, off)
    off += CRC_BYTES
    if off != len(data):
        raise TruncatedError("trailing bytes after message")
    if crc != zlib.crc32(data[: off - CRC_BYTES]):
        raise ChecksumError("CRC-32 mismatch")
    return SemanticMessage(
        zone_id=zone_id, tokens=tokens, poses=poses, goal_tag=goal_tag
    )


def extract_semantics(
    detections: list[Detection], zone: Zone
) -> list[SemanticToken]:
    """One quantized token per detection whose centroid lies in the zone."""
    toks = []
    for det in detections:
        vox = tuple(int(np.floor(c)) for c in det.centroid)
        if zone.contains(vox):
            toks.append(quantize_detection(det))
    toks.sort()
    return toks


def fuse(messages: list[SemanticMessage]) -> list[SemanticToken]:
    """Deduplicating union of the messages' tokens.

    Tokens of equal class whose dequantized centroids lie within the merge
    radius collapse to the highest-confidence representative; output in
    canonical (class, position) order.
    """
    allt = [t for m in messages for t in m.tokens]
    allt.sort(key=lambda t: (-t.confidence_q, t.class_id, t.position_q))
    reps: list[SemanticToken] = []
    for tok in allt:
        merged = False
        for rep in reps:
            if rep.class_id != tok.class_id:
                continue
            if np.linalg.norm(rep.position() - tok.position()) <= MERGE_RADIUS:
                merged = True
                break
        if not merged:
            reps.append(tok)
    reps.sort(key=lambda t: (t.class_id, t.position_q))
    return reps


def semantic_distortion(
    task_orig: list[Detection], task_recon: list[Detection]
) -> float:
    """1 - F1 of greedy same-class centroid matching within the match radius."""
    if not task_orig and not task_recon:
        return 0.0
    if not task_orig or not task_recon:
        return 1.0
    pairs = []
    for i, a in enumerate(task_orig):
        for j, b in enumerate(task_recon):
            if a.class_id != b.class_id:
                continue
            d = float(
                np.linalg.norm(np.asarray(a.centroid) - np.asarray(b.centroid))
            )
            if d <= MATCH_RADIUS:
                pairs.append((d, i, j))
    pairs.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = 0
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches += 1
    precision = matches / len(task_recon)
    recall = matches / len(task_orig)
    if precision + recall == 0:
        return 1.0
    f1 = 2 * precision * recall / (precision + recall)
    return 1.0 - f1


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (K, E)

    def __post_init__(self) -> None:
        c = np.asarray(self.centroids, dtype=np.float64)
        object.__setattr__(self, "centroids", c)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("codebook needs a (K, E) centroid matrix")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")

    @property
    def size(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    @classmethod
    def seeded(cls, k: int = 64, dim: int = 512, seed: int = 0) -> "Codebook":
        rng = rng_for(seed, "codebook")
        return cls(rng.normal(0.0, 1.0, size=(k, dim)))


def quantize(embedding: np.ndarray, codebook: Codebook) -> int:
    """Index of the nearest centroid; ties go to the lowest index."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (codebook.dim,):
        raise ValueError(
            f"embedding dim {e.shape} does not match codebook ({codebook.dim},)"
        )
    d2 = np.sum((codebook.centroids - e[None, :]) ** 2, axis=1)
    return int(np.argmin(d2))


class TokenEmbedder:
    """Deterministic token-set embedding for codebook work.

    Builds a histogram over (class bin x coarse grid cell) and applies a
    seeded Gaussian random projection per output slot. A stand-in for a
    learned encoder: fixed, fast and collision-resistant enough for
    summaries.
    """

    CELLS_PER_AXIS = 4
    CLASS_BINS = 8

    def __init__(self, grid_dims: tuple[int, int, int], dim: int = 512,
                 seed: int = 0):
        self.grid_dims = tuple(grid_dims)
        self.dim = dim
        self.seed = seed
        self._hist_dim = self.CLASS_BINS * self.CELLS_PER_AXIS**3
        self._projections: dict[int, np.ndarray] = {}

    # projection entries at std 0.25 keep embedding components order-one for
    # the few-token histograms this simulator produces
    PROJECTION_STD = 0.25

    def _projection(self, slot: int) -> np.ndarray:
        if slot not in self._projections:
            rng = rng_for(self.seed, "token-embed", slot)
            self._projections[slot] = rng.normal(
                0.0, self.PROJECTION_STD, size=(self.dim, self._hist_dim)
            )
        return self._projections[slot]

    def histogram(self, tokens: list[SemanticToken]) -> np.ndarray:
        hist = np.zeros(self._hist_dim, dtype=np.float64)
        cells = np.asarray(self.grid_dims, dtype=np.float64) / self.CELLS_PER_AXIS
        for t in tokens:
            cell = np.minimum(
                (t.position() / cells).astype(int), self.CELLS_PER_AXIS - 1
            )
            ci = int(
                cell[0] * self.CELLS_PER_AXIS**2
                + cell[1] * self.CELLS_PER_AXIS
                + cell[2]
            )
            cb = (t.class_id - 1) % self.CLASS_BINS if t.class_id > 0 else 0
            hist[cb * self.CELLS_PER_AXIS**3 + ci] += 1.0
        return hist

    def embed(self, tokens: list[SemanticToken], slot: int = 0) -> np.ndarray:
        return self._projection(slot) @ self.histogram(tokens)


@dataclass(frozen=True)
class LatentSummary:
    codes: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(not (0 <= c <= 0xFFFF) for c in self.codes):
            raise ValueError("codes must fit u16")
        if self.byte_size() > SUMMARY_BYTE_BUDGET:
            raise ValueError("summary exceeds the byte budget")

    def byte_size(self) -> int:
        return 2 + 1 + 1 + 2 + 2 * len(self.codes) + 4

    def encode(self) -> bytes:
        out = bytearray()
        out += SUMMARY_MAGIC
        out += struct.pack("<BBH", 1, 0, len(self.codes))
        out += struct.pack(f"<{len(self.codes)}H", *self.codes)
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)


def summarize_view(
    tokens: list[SemanticToken],
    codebook: Codebook,
    embedder: TokenEmbedder,
    n_projections: int = SUMMARY_PROJECTIONS,
) -> LatentSummary:
    """Quantized multi-projection summary of a token set.

    Each slot projects the canonical token histogram with an independent
    seeded projection and quantizes against the shared codebook, so small
    set differences flip at least one code with high probability.
    """
    codes = tuple(
        quantize(embedder.embed(tokens, slot), codebook)
        for slot in range(n_projections)
    )
    return LatentSummary(codes)


@dataclass(frozen=True)
class GoalFilterResult:
    tokens: list[SemanticToken]
    unknown_goal: bool


def filter_by_goal(
    tokens: list[SemanticToken],
    goal: int,
    relevance: dict[tuple[int, int], float],
    threshold: float = RELEVANCE_THRESHOLD,
) -> GoalFilterResult:
    """Keep tokens whose (goal, class) relevance clears the threshold.

    Output ordered by descending weight then canonical token order. Unknown
    goals pass every token through and set the warning flag.
    """
    known_goals = {g for g, _ in relevance}
    if goal not in known_goals:
        return GoalFilterResult(sorted(tokens), unknown_goal=True)
    kept = []
    for t in tokens:
        w = relevance.get((goal, t.class_id), 0.0)
        if w >= threshold:
            kept.append((-w, t.class_id, t.position_q, t))
    kept.sort(key=lambda item: item[:3])
    return GoalFilterResult([t for *_key, t in kept], unknown_goal=False)
