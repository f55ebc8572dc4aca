"""Scenario configuration, seeded end-to-end runs, metrics and reports.

A scenario builds a seeded scene, assigns one drone per zone, self-trains
each drone's field on its own views, federates the shared generator over
the drones' local data, runs a cooperation session for the target drone,
and closes with federated fine-tuning rounds. Every transmitted byte flows
through the network simulator and is reconciled into the metrics stream.

Outputs per run: metrics.jsonl (deterministic, byte-identical across runs
with the same config and seed), timings.json (wall-clock, deliberately kept
out of the deterministic stream), report.csv, PPM dumps of belief and final
renders, and the target's field checkpoint.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ppm, radiance
from .federation import fedavg, fedavg_round
from .generator import (
    ArchSpec,
    Conditioning,
    DenoiserParams,
    POSE_ENC_DIM,
    encode_pose,
    fit,
    linear_schedule,
    training_loss_batch,
)
from .geometry import CameraIntrinsics, look_at
from .netsim import fully_connected
from .protocol import (
    CooperationMode,
    CooperationSession,
    DroneState,
    ExchangeContext,
    LinkStats,
    ProtocolConfig,
    SwarmModels,
    TaskPriority,
    select_mode,
    run_cooperation,
)
from .radiance import RenderConfig, VoxelField
from .seeds import derive_seed, rng_for
from .semantics import Codebook, TokenEmbedder, extract_semantics, semantic_distortion
from .world import (
    Detection,
    Scene,
    SceneSpec,
    Zone,
    build_scene,
    class_color,
    ground_truth_render,
    oracle_detect,
    scene_objects,
    zone_partition,
)

BAND_HIGH_BYTES = 10 * 1024 * 1024
BAND_LOW_BYTES = 1 * 1024 * 1024

MODE_NAMES = {
    "detections": CooperationMode.DETECTIONS_ONLY,
    "semantic": CooperationMode.SEMANTIC,
    "latent": CooperationMode.LATENT,
    "raw": CooperationMode.RAW,
}


def default_config() -> dict:
    return {
        "name": "default",
        "scene": {
            "dims": [32, 32, 32],
            "n_objects": 6,
            "min_extent": 4.0,
            "max_extent": 9.0,
            "placement": "stratified",
            "stripes": 4,
        },
        "drones": {"count": 4, "poses_per_drone": 3, "target": 0},
        "requested_zones": None,
        "network": {
            "capacity": 1_000_000.0,
            "latency": 0.01,
            "obstructions": [],
        },
        "mode": "semantic",
        "auto_link": {
            "bandwidth": 1_000_000.0,
            "reliability": 0.9,
            "trusted": False,
            "task_priority": "FIDELITY",
        },
        "camera": {
            "width": 32,
            "height": 32,
            "fov_deg": 60.0,
            "near": 0.5,
            "far": 96.0,
        },
        "generator": {
            "gen_size": 16,
            "hidden": 96,
            "blocks": 2,
            "temb_dim": 16,
            "embed_dim": 64,
            "timesteps": 300,
            "pretrain_rounds": 4,
            "pretrain_steps": 600,
            "pretrain_lr": 3e-3,
        },
        "federation": {"rounds": 1, "eta": 1e-4, "epochs": 1},
        "codebook": {"k": 64, "rounds": 2},
        "protocol": {
            "tau": 0.15,
            "epsilon": 0.05,
            "max_rounds": 4,
            "guidance_weight": 2.0,
            "belief_steps": 10,
            "generate_steps": 40,
            "refine_init_frac": 0.15,
            "mask_cap_fraction": 0.25,
            "hi_bandwidth": 4_000_000.0,
            "lo_bandwidth": 200_000.0,
            "r_min": 0.3,
            "validate_threshold_db": 15.0,
            "train_steps": 300,
            "train_lr": 0.05,
            "raw_payload_multiplier": 8,
            "samples_per_ray": 48,
        },
        "utility": {"w_u": 1.0, "w_c": 1e-6},
        "field_train": {"steps": 300, "lr": 0.05},
    }


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "scene": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 4},
                    "minItems": 3,
                    "maxItems": 3,
                },
                "n_objects": {"type": "integer", "minimum": 0},
                "min_extent": {"type": "number", "exclusiveMinimum": 0},
                "max_extent": {"type": "number", "exclusiveMinimum": 0},
                "placement": {"enum": ["stratified", "uniform"]},
                "stripes": {"type": "integer", "minimum": 1},
            },
        },
        "drones": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "poses_per_drone": {"type": "integer", "minimum": 1},
                "target": {"type": "integer", "minimum": 0},
            },
        },
        "requested_zones": {
            "type": ["array", "null"],
            "items": {"type": "integer", "minimum": 0},
        },
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "capacity": {"type": "number", "exclusiveMinimum": 0},
                "latency": {"type": "number", "minimum": 0},
                "obstructions": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"type": "integer"},
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
            },
        },
        "mode": {"enum": ["auto", "semantic", "raw", "latent", "detections"]},
        "auto_link": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bandwidth": {"type": "number", "minimum": 0},
                "reliability": {"type": "number", "minimum": 0, "maximum": 1},
                "trusted": {"type": "boolean"},
                "task_priority": {"enum": ["FIDELITY", "SAFETY"]},
            },
        },
        "camera": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "width": {"type": "integer", "minimum": 4},
                "height": {"type": "integer", "minimum": 4},
                "fov_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
                "near": {"type": "number", "exclusiveMinimum": 0},
                "far": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gen_size": {"type": "integer", "minimum": 4},
                "hidden": {"type": "integer", "minimum": 1},
                "blocks": {"type": "integer", "minimum": 0},
                "temb_dim": {"type": "integer", "minimum": 2},
                "embed_dim": {"type": "integer", "minimum": 1},
                "timesteps": {"type": "integer", "minimum": 1},
                "pretrain_rounds": {"type": "integer", "minimum": 0},
                "pretrain_steps": {"type": "integer", "minimum": 0},
                "pretrain_lr": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "federation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": {"type": "integer", "minimum": 0},
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
            },
        },
        "codebook": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "rounds": {"type": "integer", "minimum": 0},
            },
        },
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau": {"type": "number", "minimum": 0},
                "epsilon": {"type": "number", "minimum": 0},
                "max_rounds": {"type": "integer", "minimum": 0},
                "guidance_weight": {"type": "number"},
                "belief_steps": {"type": "integer", "minimum": 1},
                "generate_steps": {"type": "integer", "minimum": 1},
                "refine_init_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "mask_cap_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "hi_bandwidth": {"type": "number", "minimum": 0},
                "lo_bandwidth": {"type": "number", "minimum": 0},
                "r_min": {"type": "number", "minimum": 0, "maximum": 1},
                "validate_threshold_db": {"type": "number"},
                "train_steps": {"type": "integer", "minimum": 0},
                "train_lr": {"type": "number", "exclusiveMinimum": 0},
                "raw_payload_multiplier": {"type": "integer", "minimum": 1},
                "samples_per_ray": {"type": "integer", "minimum": 2},
            },
        },
        "utility": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "w_u": {"type": "number", "minimum": 0},
                "w_c": {"type": "number", "minimum": 0},
            },
        },
        "field_train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}


class ConfigError(ValueError):
    """Invalid scenario configuration; carries every violation found."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(cfg: dict) -> list[str]:
    """Every schema and semantic violation in the config (empty = valid)."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    violations = [
        f"{'/'.join(str(p) for p in err.path) or '<root>'}: {err.message}"
        for err in validator.iter_errors(cfg)
    ]
    if violations:
        return sorted(violations)
    # semantic checks beyond the schema
    if cfg["camera"]["near"] >= cfg["camera"]["far"]:
        violations.append("camera: near must be < far")
    if cfg["scene"]["min_extent"] > cfg["scene"]["max_extent"]:
        violations.append("scene: min_extent must be <= max_extent")
    if cfg["scene"]["max_extent"] >= min(cfg["scene"]["dims"]):
        violations.append("scene: max_extent must fit inside dims")
    if cfg["drones"]["target"] >= cfg["drones"]["count"]:
        violations.append("drones: target must be < count")
    if cfg["requested_zones"] is not None:
        for z in cfg["requested_zones"]:
            if z >= cfg["drones"]["count"]:
                violations.append(f"requested_zones: zone {z} does not exist")
    node_count = cfg["drones"]["count"]
    for pair in cfg["network"]["obstructions"]:
        if any(n >= node_count or n < 0 for n in pair):
            violations.append(f"network: obstruction {pair} references unknown node")
    if cfg["generator"]["timesteps"] < cfg["protocol"]["generate_steps"]:
        violations.append("protocol: generate_steps must be <= generator timesteps")
    if cfg["generator"]["timesteps"] < cfg["protocol"]["belief_steps"]:
        violations.append("protocol: belief_steps must be <= generator timesteps")
    return sorted(violations)


def load_config(path: str | Path | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
        cfg = _deep_merge(cfg, user)
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------
# run metrics
# --------------------------------------------------------------------------

@dataclass
class RunMetrics:
    config_hash: str
    seed: int
    mode: str
    bytes_by_kind: dict[str, int] = field(default_factory=dict)
    exchange_bytes: int = 0
    fl_bytes: int = 0
    psnr_before: float = 0.0
    psnr_after: float = 0.0
    distortion_before: float = 1.0
    distortion_after: float = 1.0
    delta_traces: dict[int, list[float]] = field(default_factory=dict)
    fl_round_losses: list[tuple[float, float]] = field(default_factory=list)
    utility: float = 0.0
    refinement_payload_bytes: int = 0
    refinement_full_image_bytes: int = 0
    session_phases: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0  # reported separately, not in the stream

    def events(self) -> list[dict]:
        """Deterministic JSON-lines records (wall clock excluded)."""
        rows = [
            {
                "event": "run",
                "config_hash": self.config_hash,
                "seed": self.seed,
                "mode": self.mode,
            },
            {
                "event": "exchange",
                "bytes_by_kind": dict(sorted(self.bytes_by_kind.items())),
                "total_bytes": self.exchange_bytes,
                "phases": self.session_phases,
                "refinement_payload_bytes": self.refinement_payload_bytes,
                "refinement_full_image_bytes": self.refinement_full_image_bytes,
            },
        ]
        for pose_idx in sorted(self.delta_traces):
            rows.append(
                {
                    "event": "delta_trace",
                    "pose": pose_idx,
                    "deltas": [round(d, 9) for d in self.delta_traces[pose_idx]],
                }
            )
        for i, (pre, post) in enumerate(self.fl_round_losses):
            rows.append(
                {
                    "event": "fl_round",
                    "round": i,
                    "probe_loss_before": round(pre, 9),
                    "probe_loss_after": round(post, 9),
                    "bytes": self.fl_bytes // max(len(self.fl_round_losses), 1),
                }
            )
        rows.append(
            {
                "event": "summary",
                "psnr_before": round(self.psnr_before, 6),
                "psnr_after": round(self.psnr_after, 6),
                "distortion_before": round(self.distortion_before, 9),
                "distortion_after": round(self.distortion_after, 9),
                "utility": round(self.utility, 9),
                "total_bytes": self.exchange_bytes + self.fl_bytes,
            }
        )
        return rows


def communication_utility(
    detection_score_before: float,
    detection_score_after: float,
    n_bytes: int,
    w_u: float,
    w_c: float,
) -> float:
    """Weighted perception gain minus weighted communication cost."""
    for s in (detection_score_before, detection_score_after):
        if not (0.0 <= s <= 1.0):
            raise ValueError("detection scores must lie in [0, 1]")
    if w_u < 0 or w_c < 0:
        raise ValueError("weights must be non-negative")
    return w_u * (detection_score_after - detection_score_before) - w_c * n_bytes


def classify_band(total_bytes: int) -> str:
    """Bandwidth band from total bytes: Low < 1 MB, High > 10 MB, else Medium."""
    if total_bytes < BAND_LOW_BYTES:
        return "Low"
    if total_bytes > BAND_HIGH_BYTES:
        return "High"
    return "Medium"


# --------------------------------------------------------------------------
# field-level detection (task metric on reconstructions)
# --------------------------------------------------------------------------

def detect_field(
    fld: VoxelField,
    zones: list[Zone] | None = None,
    sigma_threshold: float = 0.5,
    min_voxels: int = 3,
    max_classes: int = 16,
) -> list[Detection]:
    """Blob detector on a reconstructed field.

    Thresholds the density grid, flood-fills connected components, assigns
    each blob the palette class nearest its density-weighted mean color,
    then merges all components of a class into one detection (scene classes
    are unique per object) with a density-weighted centroid. Zones, when
    given, restrict detection to voxels inside them.
    """
    act = fld.activated()
    occupied = act.sigma > sigma_threshold
    if zones is not None:
        zmask = np.zeros_like(occupied)
        for z in zones:
            (x0, x1), (y0, y1), (z0, z1) = z.bounds
            zmask[x0:x1, y0:y1, z0:z1] = True
        occupied &= zmask
    visited = np.zeros_like(occupied)
    dims = fld.dims
    palette = np.array([class_color(c) for c in range(1, max_classes + 1)])
    by_class: dict[int, list[np.ndarray]] = {}
    for start in np.argwhere(occupied & ~visited):
        start = tuple(start)
        if visited[start]:
            continue
        stack = [start]
        visited[start] = True
        comp = []
        while stack:
            v = stack.pop()
            comp.append(v)
            for ax in range(3):
                for dd in (-1, 1):
                    nb = list(v)
                    nb[ax] += dd
                    if 0 <= nb[ax] < dims[ax]:
                        nb = tuple(nb)
                        if occupied[nb] and not visited[nb]:
                            visited[nb] = True
                            stack.append(nb)
        if len(comp) < min_voxels:
            continue
        vox = np.array(comp)
        w = act.sigma[vox[:, 0], vox[:, 1], vox[:, 2]]
        mean_color = (
            act.rgb[vox[:, 0], vox[:, 1], vox[:, 2]] * w[:, None]
        ).sum(axis=0) / w.sum()
        cls = int(np.argmin(np.sum((palette - mean_color) ** 2, axis=1))) + 1
        by_class.setdefault(cls, []).append(vox)
    out = []
    for cls in sorted(by_class):
        vox = np.concatenate(by_class[cls])
        w = act.sigma[vox[:, 0], vox[:, 1], vox[:, 2]]
        centroid = (vox * w[:, None]).sum(axis=0) / w.sum() + 0.5
        extent = vox.max(axis=0) - vox.min(axis=0) + 1.0
        out.append(
            Detection(
                class_id=cls,
                centroid=tuple(centroid.tolist()),
                extent=tuple(extent.tolist()),
                confidence=1.0,
            )
        )
    return out


# --------------------------------------------------------------------------
# scenario execution
# --------------------------------------------------------------------------

def _zone_poses(zone: Zone, n: int):
    """Deterministic observation poses on an arc above the zone."""
    center = zone.center()
    lengths = [hi - lo for lo, hi in zone.bounds]
    radius = 0.9 * float(np.linalg.norm(lengths))
    lift = 0.8 * radius
    poses = []
    for k in range(n):
        ang = 2.0 * math.pi * k / max(n, 1) + 0.35
        eye = center + np.array(
            [radius * math.cos(ang), radius * math.sin(ang), lift]
        )
        poses.append(look_at(eye, center))
    return poses


def _merge_detections(det_lists: list[list[Detection]]) -> list[Detection]:
    best: dict[int, Detection] = {}
    for dets in det_lists:
        for d in dets:
            cur = best.get(d.class_id)
            if cur is None or d.confidence > cur.confidence:
                best[d.class_id] = d
    return [best[c] for c in sorted(best)]


def _build_drones(
    scene: Scene,
    zones: list[Zone],
    sensor_cam: CameraIntrinsics,
    gen_cam: CameraIntrinsics,
    poses_per_drone: int,
    samples_per_ray: int,
    field_steps: int,
    field_lr: float,
    seed: int,
) -> dict[int, DroneState]:
    drones = {}
    for z in zones:
        poses = _zone_poses(z, poses_per_drone)
        frames = [
            ground_truth_render(scene, p, sensor_cam, samples_per_ray)
            for p in poses
        ]
        gen_frames = [
            ground_truth_render(scene, p, gen_cam, samples_per_ray)
            for p in poses
        ]
        dets = _merge_detections(
            [oracle_detect(scene, p, sensor_cam) for p in poses]
        )
        fld = VoxelField.zeros(scene.dims)
        rng = rng_for(seed, "self-train", z.owner)
        radiance.train_on_views(
            fld, list(zip(poses, frames)), sensor_cam, field_steps, field_lr,
            rng, cfg=RenderConfig(samples_per_ray=samples_per_ray),
        )
        drones[z.owner] = DroneState(
            drone_id=z.owner,
            zone=z,
            field=fld,
            poses=poses,
            frames=frames,
            gen_frames=gen_frames,
            detections=dets,
        )
    return drones


def _pretrain_generator(
    cfg: dict,
    drones: dict[int, DroneState],
    models: SwarmModels,
    scene_dims: tuple[int, int, int],
    seed: int,
) -> int:
    """Federated pretraining: per-round local Adam then weight averaging.

    Returns the FL bytes exchanged (participants x f32 params x 2 per round).
    """
    gcfg = cfg["generator"]
    rounds = gcfg["pretrain_rounds"]
    if rounds == 0 or gcfg["pretrain_steps"] == 0:
        return 0
    datasets = {}
    for did, d in drones.items():
        tokens = extract_semantics(d.detections, d.zone)
        sem = models.embedder.embed(tokens, slot=0)
        imgs = np.stack(d.gen_frames)
        conds = [
            Conditioning(sem, encode_pose(p, tuple(float(x) for x in scene_dims)))
            for p in d.poses
        ]
        datasets[did] = (imgs, conds)
    total_bytes = 0
    from .federation import ClientUpdate

    for rnd in range(rounds):
        updates = []
        round_lr = gcfg["pretrain_lr"] * (0.6**rnd)
        for did in sorted(datasets):
            imgs, conds = datasets[did]
            local = models.params.copy()
            rng = rng_for(seed, "pretrain", rnd, did)
            fit(
                local, imgs, conds, models.sched, rng,
                steps=gcfg["pretrain_steps"], lr=round_lr,
            )
            updates.append(
                ClientUpdate(client_id=did, params=local.flat, n_k=len(conds))
            )
        merged = fedavg(updates)
        models.params = DenoiserParams(models.params.arch, merged)
        total_bytes += len(updates) * (4 * merged.size) * 2
    return total_bytes


def run_scenario(
    cfg: dict,
    seed: int,
    out_dir: str | Path | None = None,
    mode: str | None = None,
) -> RunMetrics:
    """Execute one scenario end to end; see the module docstring."""
    t_start = time.perf_counter()
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    mode_name = mode or cfg["mode"]

    scene_cfg = cfg["scene"]
    spec = SceneSpec(
        dims=tuple(scene_cfg["dims"]),
        n_objects=scene_cfg["n_objects"],
        min_extent=scene_cfg["min_extent"],
        max_extent=scene_cfg["max_extent"],
        placement=scene_cfg["placement"],
        stripes=scene_cfg["stripes"],
    )
    scene = build_scene(spec, seed)
    n_drones = cfg["drones"]["count"]
    zones = zone_partition(scene, n_drones)
    cam_cfg = cfg["camera"]
    sensor_cam = CameraIntrinsics(
        width=cam_cfg["width"], height=cam_cfg["height"],
        fov=math.radians(cam_cfg["fov_deg"]),
        near=cam_cfg["near"], far=cam_cfg["far"],
    )
    gen_size = cfg["generator"]["gen_size"]
    gen_cam = CameraIntrinsics(
        width=gen_size, height=gen_size,
        fov=math.radians(cam_cfg["fov_deg"]),
        near=cam_cfg["near"], far=cam_cfg["far"],
    )
    pcfg_d = cfg["protocol"]
    pcfg = ProtocolConfig(**pcfg_d)

    drones = _build_drones(
        scene, zones, sensor_cam, gen_cam, cfg["drones"]["poses_per_drone"],
        pcfg.samples_per_ray, cfg["field_train"]["steps"],
        cfg["field_train"]["lr"], seed,
    )

    gcfg = cfg["generator"]
    embedder = TokenEmbedder(scene.dims, dim=gcfg["embed_dim"], seed=0)
    cond_dim = 1 + gcfg["embed_dim"] + POSE_ENC_DIM
    arch = ArchSpec(
        height=gen_size, width=gen_size, channels=3, cond_dim=cond_dim,
        temb_dim=gcfg["temb_dim"], hidden=gcfg["hidden"],
        blocks=gcfg["blocks"],
    )
    params = DenoiserParams.init(arch, rng_for(seed, "denoiser-init"))
    sched = linear_schedule(gcfg["timesteps"])
    codebook = Codebook.seeded(
        k=cfg["codebook"]["k"], dim=gcfg["embed_dim"], seed=derive_seed(seed, "cb")
    )
    models = SwarmModels(
        params=params, sched=sched, codebook=codebook, embedder=embedder
    )

    # federated codebook refinement on the drones' view embeddings
    if cfg["codebook"]["rounds"] > 0:
        from .federation import fed_codebook_round

        client_embs = []
        for did in sorted(drones):
            d = drones[did]
            tokens = extract_semantics(d.detections, d.zone)
            embs = [
                models.embedder.embed(tokens, slot=s) for s in range(8)
            ]
            client_embs.append(np.stack(embs))
        for _ in range(cfg["codebook"]["rounds"]):
            models.codebook = fed_codebook_round(models.codebook, client_embs)

    fl_bytes = _pretrain_generator(cfg, drones, models, scene.dims, seed)

    target_id = cfg["drones"]["target"]
    requested = cfg["requested_zones"]
    if requested is None:
        requested = [z.id for z in zones if z.owner != target_id]

    obstructions = frozenset(
        frozenset(p) for p in cfg["network"]["obstructions"]
    )
    topo = fully_connected(
        sorted(drones), cfg["network"]["capacity"], cfg["network"]["latency"],
        obstructions,
    )

    if mode_name == "auto":
        al = cfg["auto_link"]
        coop_mode = select_mode(
            LinkStats(al["bandwidth"], al["reliability"]),
            al["trusted"], TaskPriority[al["task_priority"]], pcfg,
        )
    else:
        coop_mode = MODE_NAMES[mode_name]

    target = drones[target_id]
    probe_poses = []
    probe_truth = []
    for z_id in requested:
        owner = next(z.owner for z in zones if z.id == z_id)
        d = drones[owner]
        probe_poses.extend(d.poses)
        probe_truth.extend(d.gen_frames)
    render_cfg = RenderConfig(samples_per_ray=pcfg.samples_per_ray)

    def probe_psnr() -> float:
        scores = []
        for p, truth in zip(probe_poses, probe_truth):
            img = radiance.render_image(target.field, p, gen_cam, render_cfg)
            scores.append(radiance.psnr(img, truth))
        return float(np.mean(scores)) if scores else math.inf

    requested_zone_objs = [
        z for z in zones if z.id in requested
    ]
    gt_requested = [
        d for d in scene_objects(scene)
        if any(
            z.contains(tuple(int(np.floor(c)) for c in d.centroid))
            for z in requested_zone_objs
        )
    ]

    psnr_before = probe_psnr()
    det_before = detect_field(target.field, requested_zone_objs)
    distortion_before = semantic_distortion(gt_requested, det_before)

    session = CooperationSession(
        target=target_id, requested_zones=list(requested), mode=coop_mode,
        seq=0,
    )
    ctx = ExchangeContext(
        scene=scene, drones=drones, models=models, topo=topo, cfg=pcfg,
        sensor_cam=sensor_cam, gen_cam=gen_cam, seed=seed,
    )
    _field, bytes_by_kind, session = run_cooperation(session, ctx)

    psnr_after = probe_psnr()
    det_after = detect_field(target.field, requested_zone_objs)
    distortion_after = semantic_distortion(gt_requested, det_after)

    # post-session federated fine-tuning with plain-GD local updates
    fl_losses = []
    fed_cfg = cfg["federation"]
    if fed_cfg["rounds"] > 0:
        client_data = []
        for did in sorted(drones):
            d = drones[did]
            tokens = extract_semantics(d.detections, d.zone)
            sem = models.embedder.embed(tokens, slot=0)
            data = [
                (img, Conditioning(sem, encode_pose(p, tuple(float(x) for x in scene.dims))))
                for img, p in zip(d.gen_frames, d.poses)
            ]
            client_data.append(data)
        probe_imgs = client_data[0][0][0][None]
        probe_conds = [client_data[0][0][1]]
        for rnd in range(fed_cfg["rounds"]):
            rng = rng_for(seed, "fl-round", rnd)
            pre_loss, _ = training_loss_batch(
                models.params, probe_imgs, probe_conds, sched,
                rng_for(seed, "fl-probe", rnd),
            )
            new_params, record = fedavg_round(
                rnd, models.params, client_data, sched, fed_cfg["eta"],
                fed_cfg["epochs"], rng,
            )
            models.params = new_params
            post_loss, _ = training_loss_batch(
                models.params, probe_imgs, probe_conds, sched,
                rng_for(seed, "fl-probe", rnd),
            )
            fl_losses.append((pre_loss, post_loss))
            fl_bytes += record.bytes_exchanged

    util_cfg = cfg["utility"]
    exchange_bytes = session.total_bytes()
    utility = communication_utility(
        1.0 - distortion_before, 1.0 - distortion_after, exchange_bytes,
        util_cfg["w_u"], util_cfg["w_c"],
    )

    metrics = RunMetrics(
        config_hash=_config_hash(cfg),
        seed=seed,
        mode=mode_name,
        bytes_by_kind={k.value: v for k, v in bytes_by_kind.items()},
        exchange_bytes=exchange_bytes,
        fl_bytes=fl_bytes,
        psnr_before=psnr_before,
        psnr_after=psnr_after,
        distortion_before=distortion_before,
        distortion_after=distortion_after,
        delta_traces={k: list(v) for k, v in session.delta_traces.items()},
        fl_round_losses=fl_losses,
        utility=utility,
        refinement_payload_bytes=session.refinement_payload_bytes,
        refinement_full_image_bytes=session.refinement_full_image_bytes,
        session_phases=[p.value for p in session.phase_history],
        wall_clock_seconds=time.perf_counter() - t_start,
    )

    if out_dir is not None:
        _write_outputs(out_dir, cfg, metrics, target, gen_cam, render_cfg,
                       probe_poses, probe_truth)
    return metrics


def _config_hash(cfg: dict) -> str:
    import hashlib

    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def _write_outputs(
    out_dir: str | Path,
    cfg: dict,
    metrics: RunMetrics,
    target: DroneState,
    gen_cam: CameraIntrinsics,
    render_cfg: RenderConfig,
    probe_poses,
    probe_truth,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as f:
        for row in metrics.events():
            f.write(canonical_json(row) + "\n")
    with open(out / "timings.json", "w", encoding="utf-8") as f:
        json.dump({"wall_clock_seconds": metrics.wall_clock_seconds}, f)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        f.write(canonical_json(cfg))
    target.field.save(out / "target_field.vf")
    emit_report([metrics], out / "report.csv")
    for i, (pose, truth) in enumerate(zip(probe_poses, probe_truth)):
        img = radiance.render_image(target.field, pose, gen_cam, render_cfg)
        ppm.write_ppm(out / f"final_render_{i:02d}.ppm", img)
        ppm.write_ppm(out / f"probe_truth_{i:02d}.ppm", truth)


def emit_report(metrics: list[RunMetrics], out_path: str | Path) -> None:
    """Comparison CSV across runs with bandwidth band classification."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "mode", "seed", "total_bytes", "band", "psnr_before",
                "psnr_after", "distortion_before", "distortion_after",
                "utility",
            ]
        )
        for m in metrics:
            writer.writerow(
                [
                    m.mode, m.seed, m.exchange_bytes,
                    classify_band(m.exchange_bytes),
                    f"{m.psnr_before:.4f}", f"{m.psnr_after:.4f}",
                    f"{m.distortion_before:.6f}", f"{m.distortion_after:.6f}",
                    f"{m.utility:.9f}",
                ]
            )


def worker_cap() -> int:
    """Worker-pool size cap from SWARMSYNTH_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("SWARMSYNTH_THREADS", "1")))
    except ValueError:
        return 1


def run_many(
    cfg: dict, seeds: list[int], mode: str | None = None
) -> list[RunMetrics]:
    """Run a scenario across seeds, honoring the worker cap."""
    jobs = worker_cap()
    if jobs <= 1 or len(seeds) <= 1:
        return [run_scenario(cfg, s, mode=mode) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_scenario, cfg, s, None, mode) for s in seeds]
        return [f.result() for f in futures]
