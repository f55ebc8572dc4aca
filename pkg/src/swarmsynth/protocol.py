"""Cooperation state machine, adaptation layer and refinement dialogue.

One cooperation session runs the full exchange for a target drone: request
broadcast, responder messages in the selected mode, hallucination of the
requested views, incremental field training, validation and an optional
bounded refinement loop.

Mode semantics:
  DETECTIONS_ONLY  responders send compact detection lists; no field update.
  SEMANTIC         responders send tokens + poses; the target hallucinates
                   views with the shared generator and trains on them, then
                   refines via masked residual guidance.
  LATENT           semantic payload plus a latent summary plus the
                   responder's field checkpoint; the target splices the
                   responder's zone directly.
  RAW              responders ship their raw sensor frames (payload scaled
                   by the configured multiplier to stand in for full-rate
                   sensors) plus a field checkpoint; the target trains on
                   the frames.

Refinement keeps every byte honest: responders reproduce the target's
belief images locally (shared model, seed derived from the exchanged
summaries), so only masked residual payloads ever cross the network, and a
belief update is kept only when the responder-measured discrepancy did not
increase, which makes the per-pose discrepancy traces non-increasing.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import radiance
from .generator import (
    Conditioning,
    DenoiserParams,
    GuidancePayload,
    NoiseSchedule,
    encode_pose,
    generate_view,
)
from .geometry import CameraIntrinsics, Pose
from .netsim import DeliveryReport, NetMessage, PayloadKind, Topology, transmit
from .radiance import RenderConfig, VoxelField
from .seeds import derive_seed, rng_for
from .semantics import (
    Codebook,
    LatentSummary,
    SemanticMessage,
    SemanticToken,
    TokenEmbedder,
    WirePose,
    encode_message,
    extract_semantics,
    fuse,
    summarize_view,
)
from .world import Detection, Scene, Zone

GUIDANCE_MAGIC = b"GP"
REQUEST_MAGIC = b"RQ"
DETECTIONS_MAGIC = b"DT"


class CooperationMode(Enum):
    DETECTIONS_ONLY = "DETECTIONS_ONLY"
    SEMANTIC = "SEMANTIC"
    LATENT = "LATENT"
    RAW = "RAW"


class TaskPriority(Enum):
    FIDELITY = "FIDELITY"
    SAFETY = "SAFETY"


class Phase(Enum):
    REQUEST = "REQUEST"
    RESPONSES = "RESPONSES"
    HALLUCINATE = "HALLUCINATE"
    UPDATE = "UPDATE"
    VALIDATE = "VALIDATE"
    REFINE = "REFINE"
    DONE = "DONE"
    FAILED = "FAILED"


_LEGAL_TRANSITIONS = {
    Phase.REQUEST: {Phase.RESPONSES, Phase.DONE, Phase.FAILED},
    Phase.RESPONSES: {Phase.HALLUCINATE, Phase.UPDATE, Phase.FAILED},
    Phase.HALLUCINATE: {Phase.UPDATE},
    Phase.UPDATE: {Phase.VALIDATE},
    Phase.VALIDATE: {Phase.REFINE, Phase.DONE},
    Phase.REFINE: {Phase.DONE, Phase.FAILED},
    Phase.DONE: set(),
    Phase.FAILED: set(),
}


@dataclass
class ProtocolConfig:
    tau: float = 0.15
    epsilon: float = 0.05
    max_rounds: int = 4
    guidance_weight: float = 2.0
    belief_steps: int = 10
    generate_steps: int = 40
    refine_init_frac: float = 0.15  # re-noise level for refinement passes
    mask_cap_fraction: float = 0.25
    hi_bandwidth: float = 4_000_000.0
    lo_bandwidth: float = 200_000.0
    r_min: float = 0.3
    validate_threshold_db: float = 15.0
    train_steps: int = 300
    train_lr: float = 0.05
    raw_payload_multiplier: int = 8
    samples_per_ray: int = 48


@dataclass(frozen=True)
class LinkStats:
    bandwidth: float  # available bytes/second
    reliability: float  # in [0, 1]


def select_mode(
    link: LinkStats,
    trusted: bool,
    task_priority: TaskPriority,
    cfg: ProtocolConfig,
) -> CooperationMode:
    """Adaptation-layer decision table (deterministic in its inputs)."""
    if link.bandwidth < cfg.lo_bandwidth or link.reliability < cfg.r_min:
        return CooperationMode.DETECTIONS_ONLY
    if link.bandwidth >= cfg.hi_bandwidth and trusted:
        if task_priority is TaskPriority.FIDELITY:
            return CooperationMode.LATENT
        return CooperationMode.RAW
    return CooperationMode.SEMANTIC


# --------------------------------------------------------------------------
# drone state and session bookkeeping
# --------------------------------------------------------------------------

@dataclass
class DroneState:
    drone_id: int
    zone: Zone
    field: VoxelField
    poses: list[Pose]  # own observation poses over the zone
    frames: list[np.ndarray]  # sensor-resolution ground-truth frames
    gen_frames: list[np.ndarray]  # generator-resolution frames
    detections: list[Detection]  # merged oracle detections from own poses


@dataclass
class SwarmModels:
    params: DenoiserParams
    sched: NoiseSchedule
    codebook: Codebook
    embedder: TokenEmbedder


@dataclass
class CooperationSession:
    target: int
    requested_zones: list[int]
    mode: CooperationMode
    seq: int = 0
    phase: Phase = Phase.REQUEST
    round: int = 0
    responders: list[int] = field(default_factory=list)
    reports: list[DeliveryReport] = field(default_factory=list)
    phase_history: list[Phase] = field(default_factory=lambda: [Phase.REQUEST])
    delta_traces: dict[int, list[float]] = field(default_factory=dict)
    refinement_payload_bytes: int = 0
    refinement_full_image_bytes: int = 0
    validated: bool = False
    shared_detections: list[Detection] = field(default_factory=list)
    _msg_seq: int = 0

    def transition(self, new: Phase) -> None:
        if new not in _LEGAL_TRANSITIONS[self.phase]:
            raise RuntimeError(f"illegal phase transition {self.phase} -> {new}")
        self.phase = new
        self.phase_history.append(new)

    def next_seq(self) -> int:
        self._msg_seq += 1
        return self._msg_seq

    def bytes_by_kind(self) -> dict[PayloadKind, int]:
        from .netsim import bandwidth_ledger

        return bandwidth_ledger(self.reports)

    def total_bytes(self) -> int:
        return sum(sum(r.per_link_bytes) for r in self.reports)


@dataclass
class RefinementState:
    iteration: int = 0
    beliefs: dict[int, np.ndarray] = field(default_factory=dict)
    deltas: dict[int, float] = field(default_factory=dict)
    converged: set[int] = field(default_factory=set)


# --------------------------------------------------------------------------
# wire formats owned by the protocol
# --------------------------------------------------------------------------

def encode_request(target: int, zone_ids: list[int]) -> bytes:
    out = bytearray()
    out += REQUEST_MAGIC
    out += struct.pack("<BBHH", 1, 0, target, len(zone_ids))
    out += struct.pack(f"<{len(zone_ids)}H", *zone_ids)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_request(data: bytes) -> tuple[int, list[int]]:
    if data[:2] != REQUEST_MAGIC:
        raise ValueError("bad request magic")
    _v, _f, target, n = struct.unpack_from("<BBHH", data, 2)
    zones = list(struct.unpack_from(f"<{n}H", data, 8))
    (crc,) = struct.unpack_from("<I", data, 8 + 2 * n)
    if crc != zlib.crc32(data[: 8 + 2 * n]):
        raise ValueError("request CRC mismatch")
    return target, zones


def encode_detections(dets: list[Detection]) -> bytes:
    out = bytearray()
    out += DETECTIONS_MAGIC
    out += struct.pack("<BBH", 1, 0, len(dets))
    for d in dets:
        pos_q = [int(np.clip(round(c * 16), 0, 0xFFFF)) for c in d.centroid]
        conf_q = int(np.clip(round(d.confidence * 255), 0, 0xFF))
        out += struct.pack("<H3HB", d.class_id, *pos_q, conf_q)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def _rle_encode_mask(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the flattened mask, zeros first."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    runs = []
    current = 0
    length = 0
    for v in flat:
        if v == current:
            length += 1
        else:
            runs.append(length)
            current = 1 - current
            length = 1
    runs.append(length)
    return runs


def _rle_decode_mask(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=np.uint8)
    pos = 0
    val = 0
    for r in runs:
        if val:
            flat[pos : pos + r] = 1
        pos += r
        val = 1 - val
    if pos != flat.size:
        raise ValueError("RLE runs do not cover the mask")
    return flat.reshape(shape)


def encode_guidance(
    pose_index: int,
    delta: float,
    mask: np.ndarray,
    residual: np.ndarray,
    accept_prev: bool,
    converged: bool,
) -> bytes:
    flags = (1 if accept_prev else 0) | (2 if converged else 0)
    out = bytearray()
    out += GUIDANCE_MAGIC
    out += struct.pack("<BBHf", 1, flags, pose_index, delta)
    runs = _rle_encode_mask(mask) if mask.any() else []
    out += struct.pack("<H", len(runs))
    if runs:
        out += struct.pack(f"<{len(runs)}H", *runs)
    sel = np.asarray(mask, dtype=bool).reshape(-1)
    res_q = np.clip(
        np.rint((residual.reshape(-1, 3)[sel] + 1.0) / 2.0 * 255.0), 0, 255
    ).astype(np.uint8)
    out += res_q.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_guidance(
    data: bytes, shape: tuple[int, int]
) -> tuple[int, float, bool, bool, np.ndarray, np.ndarray]:
    if data[:2] != GUIDANCE_MAGIC:
        raise ValueError("bad guidance magic")
    _v, flags, pose_index, delta = struct.unpack_from("<BBHf", data, 2)
    off = 10
    (n_runs,) = struct.unpack_from("<H", data, off)
    off += 2
    runs = list(struct.unpack_from(f"<{n_runs}H", data, off))
    off += 2 * n_runs
    if runs:
        mask = _rle_decode_mask(runs, shape)
    else:
        mask = np.zeros(shape, dtype=np.uint8)
    n_masked = int(mask.sum())
    res_q = np.frombuffer(data[off : off + 3 * n_masked], dtype=np.uint8)
    off += 3 * n_masked
    (crc,) = struct.unpack_from("<I", data, off)
    if crc != zlib.crc32(data[:off]):
        raise ValueError("guidance CRC mismatch")
    residual = np.zeros(shape + (3,), dtype=np.float64)
    residual[mask.astype(bool)] = res_q.reshape(-1, 3) / 255.0 * 2.0 - 1.0
    return (
        pose_index,
        float(delta),
        bool(flags & 1),
        bool(flags & 2),
        mask,
        residual,
    )


# --------------------------------------------------------------------------
# discrepancy measurement (windowed structural-similarity proxy)
# --------------------------------------------------------------------------

SSIM_WINDOW = 8
SSIM_STRIDE = 4
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _window_grid(h: int, w: int) -> list[tuple[int, int]]:
    ys = list(range(0, max(h - SSIM_WINDOW, 0) + 1, SSIM_STRIDE))
    xs = list(range(0, max(w - SSIM_WINDOW, 0) + 1, SSIM_STRIDE))
    return [(y, x) for y in ys for x in xs]


def discrepancy_map(
    rendered: np.ndarray, local: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """Mean windowed structural dissimilarity plus the over-threshold mask.

    Windows are 8x8 with stride 4; the per-window score averages the
    luminance/contrast/structure similarity over channels. delta is
    1 - mean(window similarity); the mask marks every pixel of windows
    whose dissimilarity exceeds tau. Symmetric in its image arguments.
    """
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(local, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    mask = np.zeros((h, w), dtype=np.uint8)
    sims = []
    for y, x in _window_grid(h, w):
        wa = a[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW].reshape(-1, a.shape[2])
        wb = b[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW].reshape(-1, b.shape[2])
        mu_a = wa.mean(axis=0)
        mu_b = wb.mean(axis=0)
        var_a = wa.var(axis=0)
        var_b = wb.var(axis=0)
        cov = ((wa - mu_a) * (wb - mu_b)).mean(axis=0)
        s = (
            (2 * mu_a * mu_b + _SSIM_C1)
            * (2 * cov + _SSIM_C2)
            / ((mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2))
        )
        sim = float(np.mean(s))
        sims.append(sim)
        if 1.0 - sim > tau:
            mask[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW] = 1
    delta = 1.0 - float(np.mean(sims)) if sims else 0.0
    return delta, mask


def _capped_mask(
    a: np.ndarray, b: np.ndarray, tau: float, cap_fraction: float
) -> np.ndarray:
    """Over-threshold window mask, capped to a pixel-count budget by keeping
    the most dissimilar windows first."""
    h, w = a.shape[:2]
    scored = []
    for idx, (y, x) in enumerate(_window_grid(h, w)):
        wa = a[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW].reshape(-1, a.shape[2])
        wb = b[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW].reshape(-1, b.shape[2])
        mu_a, mu_b = wa.mean(axis=0), wb.mean(axis=0)
        var_a, var_b = wa.var(axis=0), wb.var(axis=0)
        cov = ((wa - mu_a) * (wb - mu_b)).mean(axis=0)
        s = (
            (2 * mu_a * mu_b + _SSIM_C1)
            * (2 * cov + _SSIM_C2)
            / ((mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2))
        )
        dis = 1.0 - float(np.mean(s))
        if dis > tau:
            scored.append((-dis, idx, y, x))
    scored.sort()
    budget = int(cap_fraction * h * w)
    mask = np.zeros((h, w), dtype=np.uint8)
    for _negdis, _idx, y, x in scored:
        trial = mask.copy()
        trial[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW] = 1
        if int(trial.sum()) > budget:
            continue
        mask = trial
    return mask


def validate(
    field: VoxelField,
    probes: list[tuple[Pose, np.ndarray]],
    threshold_db: float,
    cam: CameraIntrinsics,
    render_cfg: RenderConfig,
) -> tuple[bool, list[float]]:
    """Mean render PSNR over the probe views against the threshold."""
    if not probes:
        raise ValueError("probe set must be non-empty")
    scores = []
    for pose, img in probes:
        rendered = radiance.render_image(field, pose, cam, render_cfg)
        scores.append(radiance.psnr(rendered, img))
    mean = float(np.mean(scores))
    return mean >= threshold_db, scores


# --------------------------------------------------------------------------
# the cooperation run
# --------------------------------------------------------------------------

@dataclass
class ExchangeContext:
    """Everything a session needs to execute against the simulated world."""

    scene: Scene
    drones: dict[int, DroneState]
    models: SwarmModels
    topo: Topology
    cfg: ProtocolConfig
    sensor_cam: CameraIntrinsics
    gen_cam: CameraIntrinsics
    seed: int
    clock: float = 0.0


def _send(
    ctx: ExchangeContext,
    session: CooperationSession,
    src: int,
    dst: int,
    kind: PayloadKind,
    payload_bytes: int,
) -> DeliveryReport:
    msg = NetMessage(src, dst, kind, payload_bytes, seq=session.next_seq())
    rep = transmit(ctx.topo, msg, ctx.clock)
    session.reports.append(rep)
    return rep


def _conditioning_for(
    ctx: ExchangeContext,
    fused: list[SemanticToken],
    pose: WirePose,
    zone: Zone,
) -> Conditioning:
    """Conditioning for one requested view: fused semantics restricted to
    the zone the pose observes (matching the per-zone training pairs) plus
    the pose features."""
    local = [
        t
        for t in fused
        if zone.contains(tuple(int(np.floor(c)) for c in t.position()))
    ]
    sem = ctx.models.embedder.embed(local, slot=0)
    penc = encode_pose(pose.pose(), tuple(float(d) for d in ctx.scene.dims))
    return Conditioning(sem, penc)


def _belief_seed(
    ctx: ExchangeContext, session: CooperationSession,
    summaries: list[LatentSummary], pose_index: int, iteration: int,
) -> int:
    blob = b"".join(s.encode() for s in sorted(summaries, key=lambda s: s.codes))
    return derive_seed(
        ctx.seed, "belief", session.seq, pose_index, iteration,
        int.from_bytes(blob[:8].ljust(8, b"\0"), "little"),
    )


def run_cooperation(
    session: CooperationSession, ctx: ExchangeContext
) -> tuple[VoxelField, dict[PayloadKind, int], CooperationSession]:
    """Execute one full cooperation exchange for the session's target.

    Returns the target's updated field, the session byte ledger by payload
    kind, and the session itself (phase DONE or FAILED).
    """
    target = ctx.drones[session.target]
    cfg = ctx.cfg
    zone_owner = {d.zone.id: d.drone_id for d in ctx.drones.values()}

    candidates = sorted(
        zone_owner[z]
        for z in session.requested_zones
        if z in zone_owner and zone_owner[z] != session.target
    )
    if not candidates:
        session.transition(Phase.DONE)  # degenerate: nothing to request
        return target.field, session.bytes_by_kind(), session

    # request phase: unicast fan-out of the zone request
    req_bytes = len(encode_request(session.target, session.requested_zones))
    reachable = []
    for rid in candidates:
        rep = _send(
            ctx, session, session.target, rid, PayloadKind.REQUEST, req_bytes
        )
        if rep.delivered:
            reachable.append(rid)
    if not reachable:
        session.transition(Phase.FAILED)  # network partition
        return target.field, session.bytes_by_kind(), session
    session.transition(Phase.RESPONSES)
    session.responders = reachable

    # response phase: every reachable responder ships its zone view
    messages: list[SemanticMessage] = []
    message_senders: list[int] = []
    pose_sources: list[tuple[int, int]] = []  # (responder id, local pose idx)
    all_detections: list[Detection] = []
    any_response = False
    for rid in reachable:
        resp = ctx.drones[rid]
        tokens = extract_semantics(resp.detections, resp.zone)
        msg = SemanticMessage(
            zone_id=resp.zone.id,
            tokens=tokens,
            poses=[WirePose.from_pose(p) for p in resp.poses],
        )
        if session.mode is CooperationMode.DETECTIONS_ONLY:
            payload = len(encode_detections(resp.detections))
            rep = _send(
                ctx, session, rid, session.target, PayloadKind.DETECTIONS,
                payload,
            )
            if rep.delivered:
                any_response = True
                all_detections.extend(resp.detections)
            continue

        payload = len(encode_message(msg))
        kind = PayloadKind.SEMANTIC
        if session.mode is CooperationMode.LATENT:
            kind = PayloadKind.LATENT
            summary = summarize_view(
                msg.tokens, ctx.models.codebook, ctx.models.embedder
            )
            payload += summary.byte_size() + resp.field.checkpoint_bytes()
        elif session.mode is CooperationMode.RAW:
            kind = PayloadKind.RAW
            frame_bytes = sum(f.size for f in resp.frames)
            payload = cfg.raw_payload_multiplier * (
                frame_bytes + resp.field.checkpoint_bytes()
            )
        rep = _send(ctx, session, rid, session.target, kind, payload)
        if rep.delivered:
            any_response = True
            messages.append(msg)
            message_senders.append(rid)
            all_detections.extend(resp.detections)
            for local_idx in range(len(msg.poses)):
                pose_sources.append((rid, local_idx))
            if session.mode is CooperationMode.LATENT:
                radiance.splice_region(
                    target.field, resp.field, resp.zone.bounds
                )
            elif session.mode is CooperationMode.RAW:
                rng = rng_for(ctx.seed, "raw-train", session.seq, rid)
                radiance.train_on_views(
                    target.field,
                    list(zip(resp.poses, resp.frames)),
                    ctx.sensor_cam,
                    cfg.train_steps,
                    cfg.train_lr,
                    rng,
                    cfg=RenderConfig(samples_per_ray=cfg.samples_per_ray),
                )
    if not any_response:
        session.transition(Phase.FAILED)
        return target.field, session.bytes_by_kind(), session
    session.shared_detections = all_detections

    fused: list[SemanticToken] = []
    beliefs: dict[int, np.ndarray] = {}
    poses_flat: list[WirePose] = []
    if session.mode is CooperationMode.SEMANTIC:
        session.transition(Phase.HALLUCINATE)
        fused = fuse(messages)
        poses_flat = [p for m in messages for p in m.poses]
        for idx, wp in enumerate(poses_flat):
            zone = ctx.drones[pose_sources[idx][0]].zone
            cond = _conditioning_for(ctx, fused, wp, zone)
            rng = rng_for(ctx.seed, "hallucinate", session.seq, idx)
            beliefs[idx] = generate_view(
                ctx.models.params, cond, ctx.models.sched,
                steps=cfg.generate_steps, w=cfg.guidance_weight, g=None,
                rng=rng,
            )
        session.transition(Phase.UPDATE)
        _train_on_beliefs(ctx, session, target.field, poses_flat, beliefs)
    else:
        session.transition(Phase.UPDATE)
        # LATENT splice / RAW training already applied; DETECTIONS: no-op

    session.transition(Phase.VALIDATE)
    probes = list(zip(target.poses, target.gen_frames))
    session.validated, _scores = validate(
        target.field, probes, cfg.validate_threshold_db, ctx.gen_cam,
        RenderConfig(samples_per_ray=cfg.samples_per_ray),
    )

    # the refinement dialogue doubles as content validation for the
    # hallucinated poses: poses already below epsilon send nothing
    if session.mode is CooperationMode.SEMANTIC and cfg.max_rounds > 0:
        session.transition(Phase.REFINE)
        _refinement_dialogue(
            ctx, session, target, fused, poses_flat, beliefs,
            pose_sources, messages, message_senders,
        )
        if session.phase is not Phase.FAILED:
            session.transition(Phase.DONE)
    else:
        session.transition(Phase.DONE)
    return target.field, session.bytes_by_kind(), session


def _train_on_beliefs(
    ctx: ExchangeContext,
    session: CooperationSession,
    field: VoxelField,
    poses: list[WirePose],
    beliefs: dict[int, np.ndarray],
) -> None:
    """Incremental field update from the hallucinated views, with the
    target's own observations mixed in so its observed region stays put."""
    views = [
        (poses[i].pose(), img, ctx.gen_cam) for i, img in sorted(beliefs.items())
    ]
    if not views:
        return
    target = ctx.drones[session.target]
    views += [
        (p, img, ctx.sensor_cam)
        for p, img in zip(target.poses, target.frames)
    ]
    rng = rng_for(ctx.seed, "field-train", session.seq, session.round)
    radiance.train_on_mixed_views(
        field, views, ctx.cfg.train_steps, ctx.cfg.train_lr, rng,
        cfg=RenderConfig(samples_per_ray=ctx.cfg.samples_per_ray),
    )


def _refinement_dialogue(
    ctx: ExchangeContext,
    session: CooperationSession,
    target: DroneState,
    fused: list[SemanticToken],
    poses: list[WirePose],
    beliefs: dict[int, np.ndarray],
    pose_sources: list[tuple[int, int]],
    messages: list[SemanticMessage],
    message_senders: list[int],
) -> None:
    """Bounded masked-residual refinement over every hallucinated pose."""
    cfg = ctx.cfg
    # contextual handshake: responders broadcast latent view summaries once
    summaries = []
    for m, rid in zip(messages, message_senders):
        summary = summarize_view(m.tokens, ctx.models.codebook, ctx.models.embedder)
        summaries.append(summary)
        rep = _send(
            ctx, session, rid, session.target, PayloadKind.SUMMARY,
            summary.byte_size(),
        )
        if not rep.delivered:
            session.transition(Phase.FAILED)
            return
    state = RefinementState(beliefs=dict(beliefs))
    gen_pixels = ctx.gen_cam.width * ctx.gen_cam.height

    # responder-side truth per pose: their own generator-resolution frames
    local_truth = {
        idx: ctx.drones[rid].gen_frames[local_idx]
        for idx, (rid, local_idx) in enumerate(pose_sources)
    }

    while state.iteration < cfg.max_rounds and len(state.converged) < len(poses):
        for idx, wp in enumerate(poses):
            if idx in state.converged:
                continue
            truth = local_truth[idx]
            belief = state.beliefs[idx]
            delta, _mask = discrepancy_map(belief, truth, cfg.tau)
            session.delta_traces.setdefault(idx, []).append(delta)
            if delta < cfg.epsilon:
                state.converged.add(idx)
                continue
            # responder sends masked residual guidance
            mask = _capped_mask(belief, truth, cfg.tau, cfg.mask_cap_fraction)
            residual = np.where(
                mask[..., None].astype(bool), truth - belief, 0.0
            )
            payload = encode_guidance(
                idx, delta, mask, residual, accept_prev=False, converged=False
            )
            rid = pose_sources[idx][0]
            rep = _send(
                ctx, session, rid, session.target, PayloadKind.GUIDANCE,
                len(payload),
            )
            session.refinement_payload_bytes += len(payload)
            session.refinement_full_image_bytes += 3 * gen_pixels
            if not rep.delivered:
                session.transition(Phase.FAILED)
                return
            # target regenerates with guidance; the responder reproduces the
            # same candidate (shared model, seed derived from the exchanged
            # summaries) and the update is kept only if its measured
            # discrepancy does not increase
            _pi, _delta, _acc, _conv, mask_rx, residual_rx = decode_guidance(
                payload, (ctx.gen_cam.height, ctx.gen_cam.width)
            )
            g = GuidancePayload(mask_rx, residual_rx)
            zone = ctx.drones[pose_sources[idx][0]].zone
            cond = _conditioning_for(ctx, fused, wp, zone)
            rng = np.random.default_rng(
                _belief_seed(ctx, session, summaries, idx, state.iteration)
            )
            # two refinement candidates, evaluated identically on both ends:
            # a guided second diffusion pass seeded from the corrected
            # belief, and the residual-corrected belief itself; the belief
            # moves to whichever candidate lowers the discrepancy most, so
            # the per-pose trace can never increase
            corrected = np.clip(belief + mask_rx[..., None] * residual_rx, 0.0, 1.0)
            init_t = max(1, int(cfg.refine_init_frac * ctx.models.sched.T))
            generated = generate_view(
                ctx.models.params, cond, ctx.models.sched,
                steps=cfg.belief_steps, w=cfg.guidance_weight, g=g, rng=rng,
                init_image=corrected, init_t=init_t,
            )
            best = belief
            best_delta = delta
            for cand in (generated, corrected):
                cand_delta, _ = discrepancy_map(cand, truth, cfg.tau)
                if cand_delta < best_delta:
                    best = cand
                    best_delta = cand_delta
            state.beliefs[idx] = best
        state.iteration += 1
        session.round = state.iteration

    # close the traces with the final belief discrepancies
    for idx in sorted(state.beliefs):
        if idx not in state.converged:
            delta, _ = discrepancy_map(
                state.beliefs[idx], local_truth[idx], cfg.tau
            )
            session.delta_traces.setdefault(idx, []).append(delta)

    _train_on_beliefs(ctx, session, target.field, poses, state.beliefs)
