"""Cross-stream base network: two small CNN streams fused by learned frame correlations."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .synthgen import VideoSample, center_start, segment_bounds

N_FLOW = 5


@dataclass(frozen=True)
class AblationFlags:
    face: bool = True
    motion: bool = True
    cl: bool = True
    ml: bool = True
    al: bool = True

    def __post_init__(self):
        if not (self.face or self.motion):
            raise ValueError("at least one of face/motion must be enabled")
        if self.cl and not (self.face and self.motion):
            raise ValueError("cl requires both face and motion streams")

    @property
    def name(self) -> str:
        parts = [n for n, on in (("Face", self.face), ("Motion", self.motion)) if on]
        parts += [n for n, on in (("CL", self.cl), ("ML", self.ml), ("AL", self.al)) if on]
        return "+".join(parts)

    @classmethod
    def from_name(cls, name: str) -> "AblationFlags":
        parts = set(name.split("+"))
        unknown = parts - {"Face", "Motion", "CL", "ML", "AL"}
        if unknown:
            raise ValueError(f"unknown ablation component(s): {sorted(unknown)}")
        return cls(*(p in parts for p in ("Face", "Motion", "CL", "ML", "AL")))

    def to_dict(self) -> Dict[str, bool]:
        return asdict(self)


ABLATION_VARIANTS = [
    AblationFlags(True, False, False, False, False),
    AblationFlags(False, True, False, False, False),
    AblationFlags(True, True, False, False, False),
    AblationFlags(True, True, True, False, False),
    AblationFlags(True, True, True, True, False),
    AblationFlags(True, True, True, True, True),
]


@dataclass
class ModelConfig:
    frame_hw: int = 32
    face_channels: int = 3
    flow_channels: int = 2
    channels: Tuple[int, int, int] = (16, 32, 64)
    depth_group: int = 2
    d_s: int = 1024
    d_t: int = 512
    corr_hidden: int = 128
    bottleneck: int = 256
    n_classes: int = 2
    init_std: float = 0.01
    init: str = "gaussian"  # or "fan_in"
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.init not in ("gaussian", "fan_in"):
            raise ValueError(f"init must be 'gaussian' or 'fan_in', got '{self.init}'")

    @property
    def init_kwargs(self) -> dict:
        return {"init": self.init, "std": self.init_std}

    @property
    def map_hw(self) -> int:
        return self.frame_hw // 4

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


TINY = dict(frame_hw=16, channels=(4, 8, 8), d_s=64, d_t=32, init="fan_in")


@dataclass
class Snippet:
    sf: np.ndarray  # (Cf, H, W)
    tf: np.ndarray  # (5, Co, H, W)
    k: int
    start: int


def sample_snippets(video: VideoSample, K: int, rng: Optional[np.random.Generator] = None,
                    train: bool = True) -> List[Snippet]:
    """One snippet per equal segment: random start when training, centred start otherwise."""
    L = video.face_frames.shape[0]
    if K < 1 or L < K * (N_FLOW + 1):
        raise ValueError(f"episode of {L} frames too short for K={K} snippets of {N_FLOW + 1} frames")
    out = []
    for k, (lo, hi) in enumerate(segment_bounds(L, K)):
        if train:
            if rng is None:
                raise ValueError("training-mode snippet sampling needs an rng")
            s = int(rng.integers(lo, hi - N_FLOW + 1))
        else:
            s = center_start(lo, hi, N_FLOW)
        out.append(Snippet(video.face_frames[s], video.flow_frames[s : s + N_FLOW], k, s))
    return out


def stack_snippets(videos: Sequence[VideoSample], K: int, rng: Optional[np.random.Generator],
                   train: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Face (B*K, Cf, H, W) and flow (B*K*5, Co, H, W) arrays for a batch of videos."""
    face, flow = [], []
    for v in videos:
        for sn in sample_snippets(v, K, rng, train):
            face.append(sn.sf)
            flow.append(sn.tf)
    return np.stack(face), np.concatenate(flow)


def _conv_stack(in_ch: int, channels: Sequence[int], rng, init_kwargs, dtype) -> nc.Sequential:
    layers: List[nc.Module] = []
    c_prev = in_ch
    for i, c in enumerate(channels):
        if i:
            layers.append(nc.AvgPool(2))
        layers += [nc.Conv2d(c_prev, c, rng, **init_kwargs, dtype=dtype), nc.BatchNorm(c, dtype=dtype), nc.ReLU()]
        c_prev = c
    return nc.Sequential(layers)


class SpatialEncoder(nc.Module):
    """Face frame -> last conv maps -> depth downsample -> FC to D_s."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dt = cfg.np_dtype
        self.convs = _conv_stack(cfg.face_channels, cfg.channels, rng, cfg.init_kwargs, dt)
        c3, hw = cfg.channels[-1], cfg.map_hw
        self.head = nc.Sequential([
            nc.DepthDownsample(cfg.depth_group),
            nc.Flatten(),
            nc.Linear(c3 // cfg.depth_group * hw * hw, cfg.d_s, rng, **cfg.init_kwargs, dtype=dt),
        ])

    def forward_maps(self, sf: Tensor) -> Tuple[Tensor, Tensor]:
        maps = self.convs(sf)
        return self.head(maps), maps

    def forward(self, sf: Tensor) -> Tensor:
        return self.forward_maps(sf)[0]


class TemporalEncoder(nc.Module):
    """Five flow frames per snippet: shared per-frame convs, depth downsample, regroup by snippet, FC to D_t per row."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dt = cfg.np_dtype
        self.convs = _conv_stack(cfg.flow_channels, cfg.channels, rng, cfg.init_kwargs, dt)
        c3, hw = cfg.channels[-1], cfg.map_hw
        self.downsample = nc.DepthDownsample(cfg.depth_group)
        self.pool = nc.ReshapePool(N_FLOW, flatten=True)
        self.head = nc.Linear(c3 // cfg.depth_group * hw * hw, cfg.d_t, rng, **cfg.init_kwargs, dtype=dt)

    def forward_maps(self, tf: Tensor) -> Tuple[Tensor, Tensor]:
        """``tf`` is (N*5, Co, H, W); returns rows (N, 5, D_t) and maps (N*5, C, h, w)."""
        if tf.shape[0] % N_FLOW:
            raise nc.ShapeError(f"temporal encoder needs a multiple of {N_FLOW} frames, got {tf.shape[0]}")
        maps = self.convs(tf)
        return self.head(self.pool(self.downsample(maps))), maps

    def forward(self, tf: Tensor) -> Tensor:
        return self.forward_maps(tf)[0]


class Correlation(nc.Module):
    """alpha = softmax(FC_5(FC_128([s || flatten(t)])))."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dt = cfg.np_dtype
        self.d_s, self.d_t = cfg.d_s, cfg.d_t
        self.fc1 = nc.Linear(cfg.d_s + N_FLOW * cfg.d_t, cfg.corr_hidden, rng, **cfg.init_kwargs, dtype=dt)
        self.fc2 = nc.Linear(cfg.corr_hidden, N_FLOW, rng, **cfg.init_kwargs, dtype=dt)

    def logits(self, s: Tensor, t: Tensor) -> Tensor:
        if s.shape[-1] != self.d_s or t.shape[1:] != (N_FLOW, self.d_t):
            raise nc.ShapeError(f"correlate: expected s (N, {self.d_s}) and t (N, 5, {self.d_t}), "
                                f"got {s.shape} and {t.shape}")
        joint = nc.concat([s, t.reshape(t.shape[0], N_FLOW * self.d_t)], axis=1)
        return self.fc2(self.fc1(joint))

    def forward_pair(self, s: Tensor, t: Tensor) -> Tensor:
        return nc.softmax(self.logits(s, t), axis=-1)


def correlate(corr: Correlation, s: Tensor, t: Tensor) -> Tensor:
    return corr.forward_pair(s, t)


def fuse(s: Optional[Tensor], t: Optional[Tensor], alpha: Optional[Tensor], flags: AblationFlags) -> Tensor:
    """Snippet feature: [s || sum_j alpha_j t_j] (CL), [s || mean_j t_j] (no CL), or a single stream."""
    if flags.motion:
        if flags.cl:
            if alpha is None:
                raise ValueError("cl fusion needs correlation weights")
            temporal = (t * alpha.reshape(alpha.shape[0], N_FLOW, 1)).sum(axis=1)
        else:
            temporal = t.mean(axis=1)
    if flags.face and flags.motion:
        return nc.concat([s, temporal], axis=1)
    return s if flags.face else temporal


def consensus(per_snippet_logits: Tensor) -> Tensor:
    """Average-pool (B, K, C) snippet predictions into video-level E of shape (B, C)."""
    if per_snippet_logits.ndim == 2:
        per_snippet_logits = per_snippet_logits.reshape(1, *per_snippet_logits.shape)
    if per_snippet_logits.shape[1] < 1:
        raise ValueError("consensus needs K >= 1")
    return per_snippet_logits.mean(axis=1)


def loss_base(y: np.ndarray, E: Tensor) -> Tensor:
    """Softmax loss on consensus logits: -sum_i y_i (E_i - log sum_j exp E_j), batch-averaged."""
    y = np.asarray(y, dtype=E.dtype)
    if y.ndim == 1 and E.ndim == 1:
        y, E = y.reshape(1, -1), E.reshape(1, -1)
    return -(nc.log_softmax(E, axis=-1) * y).sum() * (1.0 / E.shape[0])


def one_hot(labels, n_classes: int = 2) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels, dtype=int)]


@dataclass
class ForwardOut:
    E: Tensor  # (B, C) consensus logits
    logits: Tensor  # (B*K, C)
    bottleneck: Tensor  # (B*K, bottleneck)
    alpha: Optional[Tensor]  # (B*K, 5)
    feature_maps: Tensor  # (B, depth, h, w), fed to the comparison network


class FFCSN(nc.Module):
    def __init__(self, cfg: ModelConfig, flags: AblationFlags, rng: np.random.Generator):
        super().__init__()
        self.cfg, self.flags = cfg, flags
        dt = cfg.np_dtype
        fused = (cfg.d_s if flags.face else 0) + (cfg.d_t if flags.motion else 0)
        if flags.face:
            self.spatial = SpatialEncoder(cfg, rng)
        if flags.motion:
            self.temporal = TemporalEncoder(cfg, rng)
        if flags.cl:
            self.correlation = Correlation(cfg, rng)
        self.fc_bottleneck = nc.Linear(fused, cfg.bottleneck, rng, **cfg.init_kwargs, dtype=dt)
        self.fc_out = nc.Linear(cfg.bottleneck, cfg.n_classes, rng, **cfg.init_kwargs, dtype=dt)

    @property
    def fused_dim(self) -> int:
        return self.fc_bottleneck.in_features

    @property
    def map_depth(self) -> int:
        return self.cfg.channels[-1] * (int(self.flags.face) + int(self.flags.motion))

    def classify_snippet(self, fused: Tensor) -> Tuple[Tensor, Tensor]:
        if fused.shape[-1] != self.fused_dim:
            raise nc.ShapeError(f"classifier expects fused dim {self.fused_dim}, got {fused.shape[-1]}")
        hidden = self.fc_bottleneck(fused).relu()
        return self.fc_out(hidden), hidden

    def forward_snippets(self, face: Optional[np.ndarray], flow: Optional[np.ndarray]):
        """Per-snippet forward. ``face`` (N, Cf, H, W); ``flow`` (N*5, Co, H, W)."""
        dt = self.cfg.np_dtype
        s = t = alpha = s_maps = t_maps = None
        if self.flags.face:
            s, s_maps = self.spatial.forward_maps(Tensor(face, dtype=dt))
        if self.flags.motion:
            t, t_maps = self.temporal.forward_maps(Tensor(flow, dtype=dt))
        if self.flags.cl:
            alpha = self.correlation.forward_pair(s, t)
        fused = fuse(s, t, alpha, self.flags)
        logits, hidden = self.classify_snippet(fused)
        return logits, hidden, alpha, s_maps, t_maps

    def forward(self, face: Optional[np.ndarray], flow: Optional[np.ndarray], K: int) -> ForwardOut:
        logits, hidden, alpha, s_maps, t_maps = self.forward_snippets(face, flow)
        n = logits.shape[0]
        B = n // K
        E = consensus(logits.reshape(B, K, self.cfg.n_classes))
        parts = []
        if s_maps is not None:
            c, h, w = s_maps.shape[1:]
            parts.append(s_maps.reshape(B, K, c, h, w).mean(axis=1))
        if t_maps is not None:
            c, h, w = t_maps.shape[1:]
            tm = t_maps.reshape(n, N_FLOW, c * h * w)
            if alpha is not None:
                weighted = (tm * alpha.reshape(n, N_FLOW, 1)).sum(axis=1)
            else:
                weighted = tm.mean(axis=1)
            parts.append(weighted.reshape(B, K, c, h, w).mean(axis=1))
        maps = parts[0] if len(parts) == 1 else nc.concat(parts, axis=1)
        return ForwardOut(E, logits, hidden, alpha, maps)

    def forward_videos(self, videos: Sequence[VideoSample], K: int, rng: Optional[np.random.Generator] = None,
                       train: bool = False) -> ForwardOut:
        face, flow = stack_snippets(videos, K, rng, train)
        return self.forward(face if self.flags.face else None, flow if self.flags.motion else None, K)
