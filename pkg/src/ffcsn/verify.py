"""Finite-difference gradient verification of every layer kind and of the composite losses."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import numcore as nc
from .advaug import AdversarialModule, ALConfig, loss_al, sample_noise
from .metalearn import ComparisonNet, MetaTask, loss_ml, task_pairs
from .model import FFCSN, AblationFlags, ModelConfig, loss_base, one_hot

TOLERANCE = 1e-4
EPSILON = 1e-5

# Each case builds (layers, input shape) from an rng; every layer is float64.
LAYER_CASES: Dict[str, Callable] = {
    "fully-connected": lambda r: ([nc.Linear(5, 4, r, init="fan_in")], (3, 5)),
    "conv2d-3x3": lambda r: ([nc.Conv2d(2, 2, r, init="fan_in")], (2, 2, 4, 4)),
    "batch-norm": lambda r: ([nc.Conv2d(1, 3, r, init="fan_in"), nc.BatchNorm(3)], (8, 1, 2, 2)),
    "batch-norm-1d": lambda r: ([nc.Linear(3, 4, r, init="fan_in"), nc.ELU(), nc.BatchNorm(4)], (8, 3)),
    "relu": lambda r: ([nc.Linear(4, 6, r, init="fan_in"), nc.ReLU()], (3, 4)),
    "elu": lambda r: ([nc.Linear(4, 6, r, init="fan_in"), nc.ELU()], (3, 4)),
    "sigmoid": lambda r: ([nc.Linear(4, 6, r, init="fan_in"), nc.Sigmoid()], (3, 4)),
    "softmax": lambda r: ([nc.Linear(4, 5, r, init="fan_in"), nc.Softmax()], (3, 4)),
    "average-pool": lambda r: ([nc.Conv2d(1, 2, r, init="fan_in"), nc.AvgPool(2)], (2, 1, 4, 4)),
    "depth-downsample": lambda r: ([nc.Conv2d(1, 4, r, init="fan_in"), nc.DepthDownsample(2)], (2, 1, 3, 3)),
    "reshape-pool": lambda r: ([nc.Conv2d(1, 3, r, init="fan_in"), nc.ReshapePool(5)], (10, 1, 3, 3)),
    "reshape-flatten": lambda r: ([nc.Conv2d(1, 2, r, init="fan_in"), nc.ReshapePool(5, flatten=True)],
                                  (10, 1, 3, 3)),
}


@dataclass
class CheckReport:
    scale: str
    errors: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_error <= tol

    def lines(self, tol: float = TOLERANCE) -> List[str]:
        out = [f"{name:28s} {err:.3e}  {'ok' if err <= tol else 'FAIL'}" for name, err in self.errors.items()]
        out.append(f"{'max':28s} {self.max_error:.3e}  {'PASS' if self.passed(tol) else 'FAIL'} "
                   f"({self.seconds:.1f}s)")
        return out


def _scale_configs(scale: str) -> Tuple[ModelConfig, ALConfig, Tuple[int, int], Optional[int]]:
    """Model/GAN configuration, comparison widths and per-parameter entry budget for a scale."""
    if scale == "tiny":
        model = ModelConfig(frame_hw=16, channels=(2, 2, 2), d_s=32, d_t=16, corr_hidden=8, bottleneck=8,
                            init="fan_in", dtype="float64")
        return model, ALConfig(noise_dim=4, g_hidden=6, feature_dim=8, d_hidden=(6, 4)), (3, 2), None
    if scale == "default":
        model = ModelConfig(init="fan_in", dtype="float64")
        return model, ALConfig(), (16, 8), 12
    raise ValueError(f"unknown scale '{scale}' (choose tiny or default)")


def check_layers(seed: int = 0) -> Dict[str, float]:
    out = {}
    for kind, build in LAYER_CASES.items():
        r = np.random.default_rng([seed, len(kind)])
        layers, shape = build(r)
        out[f"layer:{kind}"] = nc.grad_check(nc.Sequential(layers), nc.tensor(r.standard_normal(shape)),
                                             EPSILON, seed=seed)
    r = np.random.default_rng([seed, 99])
    logits = nc.Parameter(r.standard_normal((4, 3)), name="logits")
    targets = r.integers(0, 3, size=4)
    out["loss:cross-entropy"] = nc.check_gradients(
        lambda: nc.cross_entropy(logits, targets), [("logits", logits)], EPSILON).max_relative_error
    z = nc.Parameter(r.standard_normal(5), name="z")
    y = r.integers(0, 2, size=5).astype(np.float64)
    out["loss:binary-cross-entropy"] = nc.check_gradients(
        lambda: nc.binary_cross_entropy(z.sigmoid(), y), [("z", z)], EPSILON).max_relative_error
    return out


def check_composites(scale: str = "tiny", seed: int = 0) -> Dict[str, float]:
    """End-to-end checks: base loss through the full network, comparison loss, GAN losses."""
    cfg, al_cfg, g_channels, budget = _scale_configs(scale)
    rng = np.random.default_rng(seed)
    flags = AblationFlags(True, True, True, True, True)
    model = FFCSN(cfg, flags, rng)
    B, K = 4, 2
    face = rng.standard_normal((B * K, cfg.face_channels, cfg.frame_hw, cfg.frame_hw))
    flow = rng.standard_normal((B * K * 5, cfg.flow_channels, cfg.frame_hw, cfg.frame_hw))
    y = one_hot(np.array([0, 1, 1, 0]), cfg.n_classes)
    out = {}

    def base():
        return loss_base(y, model.forward(face, flow, K).E)

    res = nc.check_gradients(base, list(model.named_parameters()), EPSILON, budget, seed)
    out["composite:base-network"] = res.max_relative_error

    g = ComparisonNet(2 * model.map_depth, cfg.map_hw, rng, channels=g_channels, init="fan_in", dtype="float64")
    task = MetaTask(anchor=0, train_indices=[1, 2, 3], targets=np.array([0.0, 0.0, 1.0]))

    def meta():
        return loss_ml(task, g(task_pairs(model.forward(face, flow, K).feature_maps, task)))

    params = list(g.named_parameters("comparison.")) + list(model.named_parameters("model."))
    out["composite:comparison-network"] = nc.check_gradients(meta, params, EPSILON, budget, seed).max_relative_error

    adv = AdversarialModule(al_cfg, rng, "float64")
    real = rng.uniform(0.0, 1.0, (6, al_cfg.feature_dim))
    z = sample_noise(rng, 6, al_cfg.noise_dim)

    def d_loss():
        return loss_al(adv.D(nc.Tensor(real)), adv.D(adv.G(nc.Tensor(z))))[0]

    def g_loss():
        return loss_al(adv.D(nc.Tensor(real)), adv.D(adv.G(nc.Tensor(z))))[1]

    out["composite:discriminator"] = nc.check_gradients(
        d_loss, list(adv.D.named_parameters("D.")), EPSILON, budget, seed).max_relative_error
    out["composite:generator"] = nc.check_gradients(
        g_loss, list(adv.G.named_parameters("G.")), EPSILON, budget, seed).max_relative_error
    return out


def gradcheck_suite(scale: str = "tiny", seed: int = 0) -> CheckReport:
    start = time.perf_counter()
    report = CheckReport(scale)
    report.errors.update(check_layers(seed))
    report.errors.update(check_composites(scale, seed))
    report.seconds = time.perf_counter() - start
    return report
