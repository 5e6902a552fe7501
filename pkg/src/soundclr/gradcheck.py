"""Finite-difference gradient suite for every layer op, every loss and the composed model.

Each check draws random float64 instances, compares the analytic gradient
with central differences and keeps the worst relative error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .losses import LossConfig, cross_entropy, hybrid, sup_contrastive_unchecked

TOLERANCE = 1e-5
STEP = 1e-5


@dataclass
class SuiteReport:
    reports: list[nn.GradReport] = field(default_factory=list)
    instances: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def table(self) -> str:
        width = max(len(r.name) for r in self.reports)
        lines = [f"{'check':<{width}}  instances  max_rel_error  status"]
        for r in self.reports:
            status = "ok" if r.passed else "FAIL"
            lines.append(f"{r.name:<{width}}  {self.instances[r.name]:>9}  {r.max_rel_error:>13.3e}  {status}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Instance generators: inputs are kept away from ReLU kinks and max-pool ties
# ---------------------------------------------------------------------------


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 0.5 * gap) * gap * 2, x)


def _distinct(rng, shape):
    """Values whose pairwise gaps far exceed the finite-difference step."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * 0.1 + rng.uniform(-0.02, 0.02, size=n)
    return vals.reshape(shape)


def _op_instance(name: str, rng: np.random.Generator) -> list[np.ndarray]:
    if name == "dense":
        n, i, o = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)
        return [rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)]
    if name == "relu":
        return [_away_from_zero(rng, (rng.integers(1, 4), rng.integers(1, 7)))]
    if name == "conv2d":
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        h, w = rng.integers(3, 6), rng.integers(3, 6)
        return [rng.standard_normal((n, cin, h, w)), rng.standard_normal((cout, cin, 3, 3)), rng.standard_normal(cout)]
    if name == "maxpool2d":
        shape = (rng.integers(1, 3), rng.integers(1, 3), 2 * rng.integers(1, 4), 2 * rng.integers(1, 4))
        return [_distinct(rng, shape)]
    if name == "global_avg_pool":
        return [rng.standard_normal((rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)))]
    if name == "l2_normalize":
        return [rng.standard_normal((rng.integers(1, 5), rng.integers(2, 7))) + 0.1]
    raise KeyError(name)


def _labels_with_pairs(rng, n_classes: int, n: int) -> np.ndarray:
    """Labels where every present class appears at least twice."""
    base = np.repeat(np.arange(n_classes), 2)
    extra = rng.integers(0, n_classes, size=n - base.size)
    return rng.permutation(np.concatenate([base, extra]))


def _unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Individual checks; each returns the worst relative error over its inputs
# ---------------------------------------------------------------------------


def _check_op(op: nn.Op, rng, h) -> float:
    inputs = _op_instance(op.name, rng)
    return nn.grad_check(op, inputs, tolerance=np.inf, h=h, seed=int(rng.integers(2**31))).max_rel_error


def _check_cross_entropy(rng, h) -> float:
    n, c = rng.integers(1, 7), rng.integers(2, 7)
    logits = 3 * rng.standard_normal((n, c))
    labels = rng.integers(0, c, size=n)
    analytic = cross_entropy(logits, labels).grad
    numeric = nn.numeric_grad(lambda: cross_entropy(logits, labels).value, logits, h)
    return nn.relative_error(analytic, numeric)


def _check_sup_contrastive(rng, h, self_in_numerator: bool) -> float:
    cfg = LossConfig(tau=float(rng.choice([0.1, 0.5, 1.0])), self_in_numerator=self_in_numerator)
    n_classes = int(rng.integers(1, 4))
    n = int(rng.integers(2 * n_classes, 2 * n_classes + 5))
    labels = _labels_with_pairs(rng, n_classes, n)
    z = _unit_rows(rng, n, int(rng.integers(2, 6)))
    analytic = sup_contrastive_unchecked(z, labels, cfg).grad
    numeric = nn.numeric_grad(lambda: sup_contrastive_unchecked(z, labels, cfg).value, z, h)
    return nn.relative_error(analytic, numeric)


def _check_hybrid(rng, h) -> float:
    cfg = LossConfig(tau=0.5, alpha=float(rng.uniform()))
    n_classes = int(rng.integers(2, 4))
    n = int(rng.integers(2 * n_classes, 2 * n_classes + 4))
    labels = _labels_with_pairs(rng, n_classes, n)
    logits = rng.standard_normal((n, n_classes))
    z = _unit_rows(rng, n, 4)

    def value():
        # the unit-norm check in hybrid() would reject perturbed z
        ce = cross_entropy(logits, labels).value
        sc = sup_contrastive_unchecked(z, labels, cfg).value
        return cfg.alpha * sc + (1 - cfg.alpha) * ce

    res = hybrid(logits, z, labels, cfg)
    e_logits = nn.relative_error(res.grad_logits, nn.numeric_grad(value, logits, h))
    e_z = nn.relative_error(res.grad_z, nn.numeric_grad(value, z, h))
    return max(e_logits, e_z)


MODEL_PROBE = nn.ModelConfig(num_classes=3, conv_channels=(2, 3), rep_dim=6, proj_dim=4, in_channels=3)


def _check_model(rng, h) -> float:
    """Parameter gradients of the full network under the hybrid loss."""
    cfg = MODEL_PROBE
    params = nn.init_params(cfg, rng, dtype=np.float64)
    for k in params:
        params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    labels = _labels_with_pairs(rng, cfg.num_classes, 6)
    x = rng.standard_normal((len(labels), cfg.in_channels, 8, 8))
    loss_cfg = LossConfig(tau=0.5, alpha=0.5)

    def value():
        out = nn.forward(params, cfg, x)
        ce = cross_entropy(out.logits, labels).value
        sc = sup_contrastive_unchecked(out.z, labels, loss_cfg).value
        return 0.5 * sc + 0.5 * ce

    out = nn.forward(params, cfg, x)
    res = hybrid(out.logits, out.z, labels, loss_cfg)
    grads = nn.backward(params, cfg, out, grad_logits=res.grad_logits, grad_z=res.grad_z)
    return max(nn.relative_error(grads[k], nn.numeric_grad(value, params[k], h)) for k in params)


def default_checks() -> dict[str, Callable[[np.random.Generator, float], float]]:
    checks = {name: (lambda rng, h, op=op: _check_op(op, rng, h)) for name, op in nn.OPS.items()}
    checks["cross_entropy"] = _check_cross_entropy
    checks["sup_contrastive"] = lambda rng, h: _check_sup_contrastive(rng, h, False)
    checks["sup_contrastive_self"] = lambda rng, h: _check_sup_contrastive(rng, h, True)
    checks["hybrid"] = _check_hybrid
    checks["model"] = _check_model
    return checks


def run_suite(
    checks: dict[str, Callable] | None = None,
    instances: int = 20,
    seed: int = 0,
    tolerance: float = TOLERANCE,
    h: float = STEP,
) -> SuiteReport:
    checks = default_checks() if checks is None else checks
    report = SuiteReport()
    for i, (name, check) in enumerate(checks.items()):
        rng = np.random.default_rng([seed, i])
        errors = [float(check(rng, h)) for _ in range(instances)]
        report.reports.append(nn.GradReport(name, max(errors), tolerance, errors))
        report.instances[name] = instances
    return report


def broken(op: nn.Op, factor: float = 1.01) -> nn.Op:
    """A copy of ``op`` whose backward is scaled by ``factor``; used to test the detector."""

    def backward(grad, cache):
        return tuple(g * factor for g in op.backward(grad, cache))

    return op._replace(backward=backward)
