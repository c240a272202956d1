"""Coarse-to-fine bidirectional scene-flow network."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import numeric as nm
from .geometry import FramePair, PointCloud, furthest_point_sample, interpolate, knn_group, warp
from .layers import (
    AugmentedPointCloud,
    BfeLayer,
    FlowHead,
    SetLayer,
    bfp_decomposed,
    bfp_naive,
    flow_embedding,
    pointconv,
    predict_flow,
    upsample,
)

CHECKPOINT_MAGIC = b"BIFLOW01"


@dataclass(frozen=True)
class ModelConfig:
    """Network shape.

    ``points_per_level`` lists the subsampled sizes N^1..N^L.  Flow is
    predicted at the full input resolution and at N^1..N^(L-1); the coarsest
    level N^L only feeds features upward.  Extraction widths are
    ``channels[0]`` at full resolution and ``channels[l-1]`` at level l.
    """

    points_per_level: tuple[int, ...] = (128, 64, 32)
    channels: tuple[int, ...] = (32, 64, 96)
    in_channels: int = 3
    k_extract: int = 8
    k_bfp: int = 8
    k_fe: int = 8
    k_pred: int = 8
    interp_k: int = 3
    slope: float = nm.DEFAULT_SLOPE
    seed: int = 0
    use_bfp: bool = True
    decomposed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "points_per_level", tuple(int(n) for n in self.points_per_level))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.points_per_level)

    def validate(self) -> None:
        ppl = self.points_per_level
        if len(ppl) < 2:
            raise ValueError(f"ModelConfig: need L >= 2 levels, got {len(ppl)}")
        if any(b >= a for a, b in zip(ppl, ppl[1:])) or ppl[-1] < 1:
            raise ValueError(f"ModelConfig: points_per_level {ppl} must be strictly decreasing")
        if len(self.channels) != len(ppl):
            raise ValueError(
                f"ModelConfig: channels {self.channels} must have one width per level ({len(ppl)})"
            )
        if min(self.channels) < 1 or self.in_channels < 1:
            raise ValueError("ModelConfig: widths must be positive")
        coarsest_flow = ppl[-2]
        checks = {
            "k_extract": (self.k_extract, ppl[-2]),
            "k_bfp": (self.k_bfp, coarsest_flow),
            "k_fe": (self.k_fe, coarsest_flow),
            "k_pred": (self.k_pred, coarsest_flow),
            "interp_k": (self.interp_k, ppl[-1]),
        }
        for name, (k, limit) in checks.items():
            if not 1 <= k <= limit:
                raise ValueError(f"ModelConfig: {name}={k} must lie in [1, {limit}]")
        if not 0.0 <= self.slope < 1.0:
            raise ValueError(f"ModelConfig: slope {self.slope} not in [0, 1)")

    def level_widths(self) -> list[int]:
        """Extraction feature width at levels 0..L."""
        return [self.channels[0], *self.channels]

    # -- key=value text form, shared by checkpoints and CLI config files

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw: dict[str, Any] = {}
        for key, raw in kv.items():
            if key not in kinds:
                continue
            kind = kinds[key]
            if "tuple" in str(kind):
                kw[key] = tuple(int(x) for x in str(raw).split(",") if x.strip())
            elif kind in ("bool", bool):
                kw[key] = str(raw).strip().lower() in ("1", "true", "yes")
            elif kind in ("float", float):
                kw[key] = float(raw)
            else:
                kw[key] = int(raw)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def published_config(**overrides) -> ModelConfig:
    """Published level sizes (8192 inputs, four subsampled levels)."""
    base = dict(points_per_level=(2048, 512, 256, 64), channels=(64, 128, 256, 256), k_extract=16,
                k_bfp=16, k_fe=16, k_pred=16)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------- parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}
    w = config.level_widths()
    L = config.levels

    def mlp(prefix, widths):
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            shapes[f"{prefix}.{i}.W"] = (a, b)
            shapes[f"{prefix}.{i}.b"] = (b,)

    mlp("extract0", [3 + config.in_channels, w[0]])
    for lvl in range(1, L + 1):
        mlp(f"extract{lvl}", [3 + w[lvl - 1], w[lvl]])
    for lvl in range(L):
        c = w[lvl]
        if config.use_bfp:
            shapes[f"bfe{lvl}.W_p"] = (3, c)
            shapes[f"bfe{lvl}.W_b"] = (c, c)
            shapes[f"bfe{lvl}.W_r"] = (c, c)
            shapes[f"bfe{lvl}.b"] = (c,)
        mlp(f"fe{lvl}", [3 + 2 * c, c])
        fused = c + w[lvl + 1] + 3
        mlp(f"conv{lvl}", [3 + fused, c])
        mlp(f"head{lvl}", [c, max(c // 2, 4), 3])
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".W_p") or name.endswith(".W_b") or name.endswith(".W_r"):
        c = shape[1]
        return 3 + 2 * c  # the three blocks form one (3 + 2C, C') matrix
    return shape[0]


@dataclass
class BiPointFlowNet:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"BiPointFlowNet: missing {missing[:3]} extra {extra[:3]}")
        for name, shape in expected.items():
            if nm.value_of(self.params[name]).shape != shape:
                raise ValueError(
                    f"BiPointFlowNet: {name} has shape {nm.value_of(self.params[name]).shape}, "
                    f"expected {shape}"
                )

    def copy(self) -> "BiPointFlowNet":
        return BiPointFlowNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_heads(self) -> "BiPointFlowNet":
        """Copy with every flow-head weight and bias set to zero."""
        net = self.copy()
        for name in net.params:
            if name.startswith("head"):
                net.params[name][...] = 0.0
        return net


def init_params(config: ModelConfig, seed: int | None = None) -> BiPointFlowNet:
    """Uniform weights in +-sqrt(6 / fan_in), zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return BiPointFlowNet(config, params)


def param_count(net_or_params: BiPointFlowNet | Mapping[str, Any]) -> int:
    params = net_or_params.params if isinstance(net_or_params, BiPointFlowNet) else net_or_params
    return int(sum(nm.value_of(v).size for v in params.values()))


# ---------------------------------------------------------------- layer views


def _mlp_weights(params, prefix):
    out = []
    i = 0
    while f"{prefix}.{i}.W" in params:
        out.append((params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"]))
        i += 1
    return tuple(out)


def _set_layer(params, prefix, slope):
    return SetLayer(_mlp_weights(params, prefix), slope)


def _bfe_layer(params, lvl, config):
    return BfeLayer(
        params[f"bfe{lvl}.W_p"],
        params[f"bfe{lvl}.W_b"],
        params[f"bfe{lvl}.W_r"],
        params[f"bfe{lvl}.b"],
        k=config.k_bfp,
        slope=config.slope,
    )


# ---------------------------------------------------------------- hierarchy


@dataclass(frozen=True)
class Hierarchy:
    """Parameter-independent sampling and grouping for one frame.

    ``samples[l]`` indexes level l-1 points (l >= 1); ``full_index[l]`` maps
    level-l points back to the input frame; ``groups[l]`` are extraction
    neighbour tables into level l-1 (level 0 groups the frame itself).
    """

    samples: tuple[np.ndarray, ...]
    full_index: tuple[np.ndarray, ...]
    groups: tuple[np.ndarray, ...]
    coords: tuple[np.ndarray, ...]


def build_hierarchy(coords: np.ndarray, config: ModelConfig) -> Hierarchy:
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < config.points_per_level[0]:
        raise ValueError(
            f"forward: frame has {n} points, fewer than the first level's {config.points_per_level[0]}"
        )
    if n < config.k_extract:
        raise ValueError(f"forward: frame has {n} points, fewer than k_extract={config.k_extract}")
    samples = [np.arange(n)]
    full = [np.arange(n)]
    level_coords = [coords]
    groups = [knn_group(coords, coords, config.k_extract)]
    for n_out in config.points_per_level:
        prev = level_coords[-1]
        pick = furthest_point_sample(prev, n_out)
        samples.append(pick)
        full.append(full[-1][pick])
        level_coords.append(prev[pick])
        groups.append(knn_group(prev[pick], prev, config.k_extract))
    return Hierarchy(tuple(samples), tuple(full), tuple(groups), tuple(level_coords))


def extract_features(params, config: ModelConfig, cloud: PointCloud, hier: Hierarchy) -> list[PointCloud]:
    """Shared hierarchical extraction; returns clouds for levels 0..L."""
    slope = config.slope
    out = [
        pointconv(cloud, hier.samples[0], config.k_extract, _set_layer(params, "extract0", slope),
                  neighbors=hier.groups[0])
    ]
    for lvl in range(1, config.levels + 1):
        prev = out[-1]
        out.append(
            pointconv(prev, hier.samples[lvl], config.k_extract,
                      _set_layer(params, f"extract{lvl}", slope), neighbors=hier.groups[lvl])
        )
    return out


# ---------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    """Per-level flows (coarsest first) and intermediate values for inspection."""

    flows: list[tuple[int, Any]]
    source_index: tuple[np.ndarray, ...]
    stages: dict[str, Any]


def forward_trace(
    net: BiPointFlowNet,
    pair: FramePair,
    params: Mapping[str, Any] | None = None,
    hierarchies: tuple[Hierarchy, Hierarchy] | None = None,
) -> ForwardTrace:
    """Run the network; ``params`` may hold tape handles for differentiation."""
    cfg = net.config
    p = net.params if params is None else params
    if pair.source.width != cfg.in_channels or pair.target.width != cfg.in_channels:
        raise ValueError(
            f"forward: input feature width {pair.source.width}/{pair.target.width}, "
            f"config expects {cfg.in_channels}"
        )
    if hierarchies is None:
        hierarchies = (
            build_hierarchy(nm.value_of(pair.source.coords), cfg),
            build_hierarchy(nm.value_of(pair.target.coords), cfg),
        )
    src_h, tgt_h = hierarchies
    src = extract_features(p, cfg, pair.source, src_h)
    tgt = extract_features(p, cfg, pair.target, tgt_h)
    stages: dict[str, Any] = {"extract_source": src, "extract_target": tgt}
    bfp = bfp_decomposed if cfg.decomposed else bfp_naive

    L = cfg.levels
    flows: list[tuple[int, Any]] = []
    flow = None
    carried = None
    for lvl in reversed(range(L)):
        S, T = src[lvl], tgt[lvl]
        if flow is None:
            up_feats = interpolate(src[L], S.coords, cfg.interp_k)
            up_flow = np.zeros((S.n, 3))
        else:
            up_feats, up_flow = upsample(carried, flow, S.coords, cfg.interp_k)
        warped = warp(S.coords, up_flow)
        P = PointCloud(warped, S.feats)
        if cfg.use_bfp:
            P_aug, Q_aug = bfp(P, T, _bfe_layer(p, lvl, cfg))
        else:
            P_aug = AugmentedPointCloud(warped, S.feats)
            Q_aug = AugmentedPointCloud(T.coords, T.feats)
        emb = flow_embedding(P_aug, Q_aug, cfg.k_fe, _set_layer(p, f"fe{lvl}", cfg.slope))
        fused = nm.concat([emb, up_feats, up_flow])
        head = FlowHead(_mlp_weights(p, f"head{lvl}"), cfg.slope)
        flow = predict_flow(warped, up_flow, fused, _set_layer(p, f"conv{lvl}", cfg.slope), head,
                            cfg.k_pred)
        carried = PointCloud(S.coords, P_aug.aug_feats)
        flows.append((lvl, flow))
        stages[f"level{lvl}"] = {
            "upsampled_flow": up_flow,
            "upsampled_feats": up_feats,
            "warped": warped,
            "aug_source": P_aug.aug_feats,
            "aug_target": Q_aug.aug_feats,
            "embedding": emb,
            "flow": flow,
        }
    return ForwardTrace(flows, src_h.full_index, stages)


def forward(net: BiPointFlowNet, pair: FramePair, params=None, hierarchies=None):
    """List of (level, flow) from coarsest to finest; the last is at full source resolution."""
    return forward_trace(net, pair, params, hierarchies).flows


def predict(net: BiPointFlowNet, pair: FramePair) -> np.ndarray:
    return nm.value_of(forward(net, pair)[-1][1])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: BiPointFlowNet, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_bytes(net: BiPointFlowNet) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = net.config.to_text().encode("utf-8")
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    for name in param_shapes(net.config):
        arr = np.ascontiguousarray(nm.value_of(net.params[name]), dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint(path: str | Path) -> BiPointFlowNet:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> BiPointFlowNet:
    view = memoryview(data)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise ValueError("checkpoint: bad magic header")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError(f"checkpoint: truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<Q", take(8))
    config = ModelConfig.from_text(bytes(take(cfg_len)).decode("utf-8"))
    params = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = arr
    return BiPointFlowNet(config, params)

