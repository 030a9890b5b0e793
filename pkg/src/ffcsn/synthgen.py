"""Synthetic face/flow episodes with class-dependent cue asynchrony.

Each episode is split into ``n_segments`` equal segments. In every segment a
face cue (a Gaussian blob held on two consecutive face frames, ending at frame
``t``) is followed by a single-frame flow cue at ``t + lag``. Truthful samples
have lag 0; deceptive samples draw the lag from ``lag_deceptive``. The onset
``t`` sits at the segment's centre snippet start (plus a small jitter) so the
deterministic evaluation snippet always sees both cues.

A sample may also carry a weak "leak": with probability ``leak_prob`` the
face cues are stretched anisotropically in a class-dependent direction, and
independently with the same probability the flow cues are. With
``leak_prob=0`` the lag is the only class signal.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import container

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TRUTHFUL, DECEPTIVE = 0, 1


class DatasetError(RuntimeError):
    pass


@dataclass
class GenConfig:
    n_identities: int = 58
    n_videos: int = 104
    n_deceptive: int = 54
    episode_len: int = 45
    frame_hw: int = 32
    face_channels: int = 3
    flow_channels: int = 2
    n_segments: int = 3
    lag_truthful: int = 0
    lag_deceptive: Tuple[int, ...] = (2, 3)
    leak_prob: float = 0.65
    leak_strength: float = 0.3
    noise_std: float = 0.1
    cue_radius: float = 3.0
    cue_amplitude: float = 1.0
    texture_amplitude: float = 0.05
    face_hold: int = 2
    onset_jitter: int = 1
    snippet_frames: int = 5

    def __post_init__(self):
        self.lag_deceptive = tuple(int(v) for v in self.lag_deceptive)

    def validate(self) -> None:
        if self.n_identities < 1 or self.n_videos < self.n_identities:
            raise ValueError(f"need n_videos >= n_identities >= 1, got {self.n_videos}, {self.n_identities}")
        if not 0 <= self.n_deceptive <= self.n_videos:
            raise ValueError(f"n_deceptive={self.n_deceptive} outside [0, n_videos]")
        if not 0.0 <= self.leak_prob <= 1.0:
            raise ValueError(f"leak_prob={self.leak_prob} outside [0, 1]")
        if self.lag_truthful != 0:
            raise ValueError("lag_truthful is fixed at 0")
        if not self.lag_deceptive or min(self.lag_deceptive) < 1:
            raise ValueError(f"lag_deceptive must be non-empty positive lags, got {self.lag_deceptive}")
        seg = self.segment_len
        if seg < self.snippet_frames + 1:
            raise ValueError(f"segment length {seg} shorter than a snippet ({self.snippet_frames + 1} frames)")
        if max(self.lag_deceptive) >= seg:
            raise ValueError(f"lag {max(self.lag_deceptive)} >= segment length {seg}")

    @property
    def segment_len(self) -> int:
        return self.episode_len // self.n_segments

    @property
    def n_truthful(self) -> int:
        return self.n_videos - self.n_deceptive

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lag_deceptive"] = list(self.lag_deceptive)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass
class VideoSample:
    identity_id: int
    label: int
    face_frames: np.ndarray  # (L, Cf, H, W) float32
    flow_frames: np.ndarray  # (L, Co, H, W) float32
    face_cue_frames: List[int] = field(default_factory=list)
    flow_cue_frames: List[int] = field(default_factory=list)
    face_leak: bool = False
    flow_leak: bool = False

    @property
    def lags(self) -> List[int]:
        return [b - a for a, b in zip(self.face_cue_frames, self.flow_cue_frames)]

    def to_entries(self) -> Dict[str, np.ndarray]:
        return {
            "face_frames": self.face_frames,
            "flow_frames": self.flow_frames,
            "identity_id": np.array([self.identity_id], dtype=np.float64),
            "label": np.array([self.label], dtype=np.float64),
            "face_cue_frames": np.array(self.face_cue_frames, dtype=np.float64),
            "flow_cue_frames": np.array(self.flow_cue_frames, dtype=np.float64),
            "leaks": np.array([self.face_leak, self.flow_leak], dtype=np.float64),
        }

    @classmethod
    def from_entries(cls, e: Dict[str, np.ndarray]) -> "VideoSample":
        return cls(
            identity_id=int(e["identity_id"][0]),
            label=int(e["label"][0]),
            face_frames=e["face_frames"],
            flow_frames=e["flow_frames"],
            face_cue_frames=[int(v) for v in e["face_cue_frames"]],
            flow_cue_frames=[int(v) for v in e["flow_cue_frames"]],
            face_leak=bool(e["leaks"][0]),
            flow_leak=bool(e["leaks"][1]),
        )

    def equals(self, other: "VideoSample") -> bool:
        return (
            self.identity_id == other.identity_id
            and self.label == other.label
            and self.face_frames.dtype == other.face_frames.dtype
            and np.array_equal(self.face_frames, other.face_frames)
            and np.array_equal(self.flow_frames, other.flow_frames)
            and self.face_cue_frames == other.face_cue_frames
            and self.flow_cue_frames == other.flow_cue_frames
            and (self.face_leak, self.flow_leak) == (other.face_leak, other.flow_leak)
        )


def _blob(hw: int, cy: float, cx: float, sy: float, sx: float) -> np.ndarray:
    y = np.arange(hw)[:, None]
    x = np.arange(hw)[None, :]
    return np.exp(-0.5 * (((y - cy) / sy) ** 2 + ((x - cx) / sx) ** 2))


def identity_texture(identity_id: int, cfg: GenConfig, texture_seed: int = 0) -> np.ndarray:
    r = np.random.default_rng([texture_seed, 7919, identity_id])
    return cfg.texture_amplitude * r.standard_normal((cfg.face_channels, cfg.frame_hw, cfg.frame_hw))


def cue_sigmas(cfg: GenConfig, label: int, leak: bool) -> Tuple[float, float]:
    """(sigma_y, sigma_x) of a cue blob; a leak stretches it along x for deceptive, y for truthful."""
    base = cfg.cue_radius / 2.0
    if not leak:
        return base, base
    sign = 1.0 if label == DECEPTIVE else -1.0
    return base * (1.0 - sign * cfg.leak_strength), base * (1.0 + sign * cfg.leak_strength)


def segment_bounds(episode_len: int, k: int) -> List[Tuple[int, int]]:
    seg = episode_len // k
    return [(i * seg, (i + 1) * seg) for i in range(k)]


def center_start(lo: int, hi: int, snippet_frames: int = 5) -> int:
    """Start index of the centred snippet within segment [lo, hi)."""
    return lo + (hi - lo - snippet_frames) // 2


def render_episode(identity_id: int, label: int, rng: np.random.Generator, cfg: Optional[GenConfig] = None,
                   texture_seed: int = 0) -> VideoSample:
    cfg = cfg or GenConfig()
    if not 0 <= identity_id < cfg.n_identities:
        raise ValueError(f"identity_id {identity_id} outside [0, {cfg.n_identities})")
    if label not in (TRUTHFUL, DECEPTIVE):
        raise ValueError(f"label must be 0 or 1, got {label}")
    L, H = cfg.episode_len, cfg.frame_hw
    face = np.zeros((L, cfg.face_channels, H, H))
    flow = np.zeros((L, cfg.flow_channels, H, H))
    face_leak = bool(rng.random() < cfg.leak_prob)
    flow_leak = bool(rng.random() < cfg.leak_prob)
    face_sig = cue_sigmas(cfg, label, face_leak)
    flow_sig = cue_sigmas(cfg, label, flow_leak)
    margin = cfg.cue_radius
    face_ts, flow_ts = [], []
    for lo, hi in segment_bounds(L, cfg.n_segments):
        t = center_start(lo, hi, cfg.snippet_frames) + int(rng.integers(0, cfg.onset_jitter + 1))
        lag = cfg.lag_truthful if label == TRUTHFUL else int(rng.choice(cfg.lag_deceptive))
        if t - cfg.face_hold + 1 < lo or t + lag >= hi:
            raise ValueError(f"cue at frame {t} with lag {lag} leaves segment [{lo}, {hi})")
        cy, cx = rng.uniform(margin, H - 1 - margin, size=2)
        face_blob = cfg.cue_amplitude * _blob(H, cy, cx, *face_sig)
        for f in range(t - cfg.face_hold + 1, t + 1):
            face[f] += face_blob
        cy, cx = rng.uniform(margin, H - 1 - margin, size=2)
        theta = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.cos(theta), np.sin(theta)] + [0.0] * (cfg.flow_channels - 2))
        flow[t + lag] += direction[:, None, None] * cfg.cue_amplitude * _blob(H, cy, cx, *flow_sig)
        face_ts.append(t)
        flow_ts.append(t + lag)
    face += identity_texture(identity_id, cfg, texture_seed)
    face += rng.normal(0.0, cfg.noise_std, face.shape)
    flow += rng.normal(0.0, cfg.noise_std, flow.shape)
    return VideoSample(identity_id, label, face.astype(np.float32), flow.astype(np.float32),
                       face_ts, flow_ts, face_leak, flow_leak)


def assign_identities_and_labels(cfg: GenConfig, seed: int) -> Tuple[List[int], List[int]]:
    """Round-robin identities; labels are a seeded shuffle of the configured class split."""
    ids = [i % cfg.n_identities for i in range(cfg.n_videos)]
    labels = np.array([TRUTHFUL] * cfg.n_truthful + [DECEPTIVE] * cfg.n_deceptive)
    np.random.default_rng([seed, 1]).shuffle(labels)
    return ids, [int(v) for v in labels]


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, index])


def generate_samples(cfg: GenConfig, seed: int) -> List[VideoSample]:
    cfg.validate()
    ids, labels = assign_identities_and_labels(cfg, seed)
    return [render_episode(i, y, _sample_rng(seed, n), cfg, texture_seed=seed)
            for n, (i, y) in enumerate(zip(ids, labels))]


@dataclass
class DatasetManifest:
    gen_config: GenConfig
    seed: int
    records: List[dict]
    version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(
            {"version": self.version, "gen_config": self.gen_config.to_dict(), "seed": self.seed,
             "records": self.records},
            indent=2, sort_keys=True,
        )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(cfg: GenConfig, seed: int, out_dir) -> DatasetManifest:
    """Render every sample and write ``manifest.json`` plus one container per sample."""
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"output directory {out} is not writable: {exc}") from exc
    records = []
    for n, sample in enumerate(generate_samples(cfg, seed)):
        name = f"sample_{n:04d}.ffcs"
        container.save(out / name, sample.to_entries())
        records.append({"file": name, "identity_id": sample.identity_id, "label": sample.label,
                        "sha256": _sha256(out / name)})
    manifest = DatasetManifest(cfg, seed, records)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    log.info("wrote %d samples to %s", len(records), out)
    return manifest


class Dataset:
    """In-memory samples with an access log of every index read through ``__getitem__``."""

    def __init__(self, samples: Sequence[VideoSample], gen_config: GenConfig, seed: int = 0):
        self.samples = list(samples)
        self.gen_config = gen_config
        self.seed = seed
        self.access_log: List[int] = []

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> VideoSample:
        self.access_log.append(int(index))
        return self.samples[index]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])

    @property
    def identity_ids(self) -> np.ndarray:
        return np.array([s.identity_id for s in self.samples])

    @classmethod
    def synthesize(cls, cfg: GenConfig, seed: int) -> "Dataset":
        return cls(generate_samples(cfg, seed), cfg, seed)


def read_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: dataset version {meta.get('version')} != {FORMAT_VERSION}")
    cfg = GenConfig.from_dict(meta["gen_config"])
    L, H = cfg.episode_len, cfg.frame_hw
    samples = []
    for rec in meta["records"]:
        fpath = path.parent / rec["file"]
        if not fpath.exists():
            raise DatasetError(f"missing sample file {fpath}")
        if _sha256(fpath) != rec["sha256"]:
            raise DatasetError(f"checksum mismatch for {fpath}")
        try:
            sample = VideoSample.from_entries(container.load(fpath))
        except (container.ContainerError, KeyError) as exc:
            raise DatasetError(f"cannot parse {fpath}: {exc}") from exc
        if sample.face_frames.shape != (L, cfg.face_channels, H, H) or \
                sample.flow_frames.shape != (L, cfg.flow_channels, H, H):
            raise DatasetError(f"shape mismatch in {fpath}: {sample.face_frames.shape}, {sample.flow_frames.shape}")
        if sample.identity_id != rec["identity_id"] or sample.label != rec["label"]:
            raise DatasetError(f"{fpath}: identity/label disagree with manifest")
        samples.append(sample)
    counts = np.bincount([s.label for s in samples], minlength=2)
    if counts[DECEPTIVE] != cfg.n_deceptive or counts[TRUTHFUL] != cfg.n_truthful:
        raise DatasetError(f"{path}: label counts {counts.tolist()} disagree with gen_config")
    return Dataset(samples, cfg, int(meta["seed"]))
