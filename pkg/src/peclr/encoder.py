"""The model ``f = g o E``: conv encoder, projection head or pose head, checkpoints.

Checkpoint layout (little-endian)::

    8 bytes   magic  b"PCLRCKPT"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON (sorted keys): config, tensor manifest
              (name, shape, offset in float64 elements), optimizer scalars,
              schedule step, rng state, free-form meta
    payload   raw float64 data for every tensor in manifest order
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .ndiff import Graph
from .seeding import substream

CKPT_MAGIC = b"PCLRCKPT"
CKPT_VERSION = 1
N_POSE_OUT = 21 * 2 + 21


class CheckpointError(Exception):
    pass


@dataclass
class EncoderConfig:
    input_side: int = 64
    widths: tuple = (8, 16, 32, 64)
    feature_dim: int = 128
    m: int = 64
    proj_hidden: int = 128
    head: str = "projection"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.m < 2:
            raise ValueError("latent point count m must be at least 2")
        if self.head not in ("projection", "pose"):
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.widths) != 4:
            raise ValueError("encoder has exactly four conv stages")
        if self.input_side % 16:
            raise ValueError("input side must be divisible by 16")

    @property
    def out_dim(self) -> int:
        return 2 * self.m if self.head == "projection" else N_POSE_OUT

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _he_uniform(rng, shape, fan_in):
    lim = math.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


ENCODER_PARAMS = tuple(f"conv{i}.{p}" for i in range(4) for p in "wb") + ("fc.w", "fc.b")
PROJECTION_PARAMS = ("proj1.w", "proj1.b", "proj2.w", "proj2.b")
POSE_PARAMS = ("pose.w", "pose.b")


def init_encoder(cfg: EncoderConfig, rng) -> Dict[str, np.ndarray]:
    p = {}
    cin = 3
    for i, w in enumerate(cfg.widths):
        p[f"conv{i}.w"] = _he_uniform(rng, (3, 3, cin, w), 9 * cin)
        p[f"conv{i}.b"] = np.zeros(w)
        cin = w
    flat = (cfg.input_side // 16) ** 2 * cfg.widths[-1]
    p["fc.w"] = _he_uniform(rng, (flat, cfg.feature_dim), flat)
    p["fc.b"] = np.zeros(cfg.feature_dim)
    return p


def init_projection(cfg: EncoderConfig, rng) -> Dict[str, np.ndarray]:
    return {
        "proj1.w": _he_uniform(rng, (cfg.feature_dim, cfg.proj_hidden), cfg.feature_dim),
        "proj1.b": np.zeros(cfg.proj_hidden),
        "proj2.w": _he_uniform(rng, (cfg.proj_hidden, 2 * cfg.m), cfg.proj_hidden),
        "proj2.b": np.zeros(2 * cfg.m),
    }


def init_pose_head(cfg: EncoderConfig, rng) -> Dict[str, np.ndarray]:
    return {"pose.w": _he_uniform(rng, (cfg.feature_dim, N_POSE_OUT), cfg.feature_dim),
            "pose.b": np.zeros(N_POSE_OUT)}


def param_shapes(cfg: EncoderConfig) -> Dict[str, tuple]:
    shapes, cin = {}, 3
    for i, w in enumerate(cfg.widths):
        shapes[f"conv{i}.w"], shapes[f"conv{i}.b"] = (3, 3, cin, w), (w,)
        cin = w
    flat = (cfg.input_side // 16) ** 2 * cfg.widths[-1]
    shapes["fc.w"], shapes["fc.b"] = (flat, cfg.feature_dim), (cfg.feature_dim,)
    if cfg.head == "projection":
        shapes.update({"proj1.w": (cfg.feature_dim, cfg.proj_hidden), "proj1.b": (cfg.proj_hidden,),
                       "proj2.w": (cfg.proj_hidden, 2 * cfg.m), "proj2.b": (2 * cfg.m,)})
    else:
        shapes.update({"pose.w": (cfg.feature_dim, N_POSE_OUT), "pose.b": (N_POSE_OUT,)})
    return shapes


def preprocess(images: np.ndarray) -> np.ndarray:
    """uint8-range RGB to roughly zero-centred network input."""
    return np.asarray(images, dtype=np.float64) / 127.5 - 1.0


def pose_decode_scale(side: int) -> tuple:
    """Per-output scale and offset turning raw pose-head output into px / cm."""
    scale = np.concatenate([np.full(42, side / 2.0), np.full(21, 10.0)])
    offset = np.concatenate([np.full(42, side / 2.0), np.zeros(21)])
    return scale, offset


def build_encoder(g: Graph, x, cfg: EncoderConfig):
    h = x
    for i in range(4):
        h = g.relu(g.conv2d(h, g.param(f"conv{i}.w"), g.param(f"conv{i}.b"), stride=2))
    return g.relu(g.dense(g.flatten(h), g.param("fc.w"), g.param("fc.b")))


def build_head(g: Graph, feats, cfg: EncoderConfig):
    if cfg.head == "projection":
        h = g.relu(g.dense(feats, g.param("proj1.w"), g.param("proj1.b")))
        return g.dense(h, g.param("proj2.w"), g.param("proj2.b"))
    raw = g.dense(feats, g.param("pose.w"), g.param("pose.b"))
    scale, offset = pose_decode_scale(cfg.input_side)
    return g.add(g.mul(raw, np.broadcast_to(scale, raw.shape)), offset)


class Model:
    """Parameters plus cached per-batch-size graphs sharing them."""

    def __init__(self, cfg: EncoderConfig, params: Dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self._graphs: Dict[int, Graph] = {}
        expected = set(ENCODER_PARAMS) | set(PROJECTION_PARAMS if cfg.head == "projection" else POSE_PARAMS)
        if set(params) != expected:
            raise CheckpointError(f"parameter set does not match a {cfg.head}-headed model: "
                                  f"missing {sorted(expected - set(params))}, extra {sorted(set(params) - expected)}")

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int) -> "Model":
        rng = substream(seed, "init")
        params = init_encoder(cfg, rng)
        params.update(init_projection(cfg, rng) if cfg.head == "projection" else init_pose_head(cfg, rng))
        return cls(cfg, params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def graph(self, batch: int) -> Graph:
        if batch not in self._graphs:
            s = self.cfg.input_side
            g = Graph(self.params)
            x = g.input("x", (batch, s, s, 3))
            feats = build_encoder(g, x, self.cfg)
            g.output("features", feats)
            g.output("out", build_head(g, feats, self.cfg))
            self._graphs[batch] = g
        return self._graphs[batch]

    def _check_images(self, images):
        s = self.cfg.input_side
        if images.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise ValueError(f"expected images of shape (B, {s}, {s}, 3), got {images.shape}")

    def run(self, images: np.ndarray) -> Dict[str, np.ndarray]:
        images = np.asarray(images)
        self._check_images(images)
        return self.graph(len(images)).forward({"x": preprocess(images)})

    def run_batched(self, images, key: str = "out", batch: int = 64) -> np.ndarray:
        outs = [self.run(images[i:i + batch])[key] for i in range(0, len(images), batch)]
        return np.concatenate(outs) if outs else np.zeros((0,))

    def features(self, images, batch: int = 64) -> np.ndarray:
        return self.run_batched(images, "features", batch)

    def backward(self, images_batch: int, out_grad: np.ndarray) -> Dict[str, np.ndarray]:
        """Parameter gradients for the most recent ``run`` on a batch of this size."""
        grads = self.graph(images_batch).backward({"out": out_grad}, wrt_inputs=False)
        return {k: grads[k] for k in self.params}

    def predict_pose(self, images, batch: int = 64):
        """(J2D px, d_r cm) predictions; root depth offset pinned to 0."""
        if self.cfg.head != "pose":
            raise ValueError("model has no pose head")
        out = self.run_batched(np.asarray(images), "out", batch)
        j2d = out[:, :42].reshape(-1, 21, 2)
        d_r = out[:, 42:].copy()
        d_r[:, 0] = 0.0
        return j2d, d_r

    def clone(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})


def encode_project(model: Model, images: np.ndarray) -> np.ndarray:
    """(B, 2m) latent projections for a batch of images."""
    if model.cfg.head != "projection":
        raise ValueError("model has no projection head")
    return model.run(images)["out"]


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    config: EncoderConfig
    params: Dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)   # {"step", "lars", "weight_decay", "m": {}, "v": {}}
    schedule_step: int = 0
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def model(self) -> Model:
        return Model(self.config, self.params)

    @classmethod
    def from_model(cls, model: Model, **kw) -> "Checkpoint":
        return cls(model.cfg, model.params, **kw)


def _tensors(ck: Checkpoint):
    items = [(f"param/{k}", ck.params[k]) for k in sorted(ck.params)]
    for moment in ("m", "v"):
        for k in sorted(ck.optimizer.get(moment, {})):
            items.append((f"adam_{moment}/{k}", ck.optimizer[moment][k]))
    return items


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    tensors = _tensors(ck)
    manifest, offset = [], 0
    for name, arr in tensors:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    opt = {k: v for k, v in ck.optimizer.items() if k not in ("m", "v")}
    header = json.dumps({
        "config": ck.config.to_dict(), "tensors": manifest, "optimizer": opt,
        "schedule_step": int(ck.schedule_step), "rng_state": ck.rng_state, "meta": ck.meta,
        "payload_elements": offset,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    return CKPT_MAGIC + struct.pack("<IQ", ck.version, len(header)) + header + payload


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def parse_checkpoint(data: bytes, expect_config: Optional[EncoderConfig] = None) -> Checkpoint:
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(data) < 20:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < 20 + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    payload = data[20 + hlen:]
    n = header["payload_elements"]
    if len(payload) != 8 * n:
        raise CheckpointError(f"payload has {len(payload)} bytes, manifest needs {8 * n}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    cfg = EncoderConfig(**header["config"])
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError(f"checkpoint config {cfg} does not match expected {expect_config}")
    params, m, v = {}, {}, {}
    expected_offset = 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["offset"] != expected_offset or t["offset"] + size > n:
            raise CheckpointError(f"manifest offset disagreement at {t['name']}")
        arr = flat[t["offset"]:t["offset"] + size].reshape(t["shape"]).copy()
        expected_offset += size
        kind, name = t["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = arr
    if expected_offset != n:
        raise CheckpointError("manifest does not cover the payload")
    opt = dict(header["optimizer"])
    if m or v:
        opt["m"], opt["v"] = m, v
    ck = Checkpoint(cfg, params, opt, header["schedule_step"], header["rng_state"], header["meta"], version)
    ck.model()  # validates parameter names against the config
    ref = param_shapes(cfg)
    for k, a in params.items():
        if a.shape != ref[k]:
            raise CheckpointError(f"tensor {k} has shape {a.shape}, config implies {ref[k]}")
    return ck


def load(path, expect_config: Optional[EncoderConfig] = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expect_config)


def swap_head_for_pose(ck: Checkpoint, seed: int = 0) -> Checkpoint:
    """Drop the projection head, attach a fresh linear pose head, reset optimizer state."""
    if ck.config.head != "projection":
        raise ValueError("checkpoint already has a pose head")
    cfg = EncoderConfig(**{**ck.config.to_dict(), "head": "pose"})
    params = {k: ck.params[k].copy() for k in ENCODER_PARAMS}
    params.update(init_pose_head(cfg, substream(seed, "head")))
    meta = dict(ck.meta)
    meta["pretrained_from"] = meta.get("objective", "unknown")
    return Checkpoint(cfg, params, {}, 0, None, meta)
