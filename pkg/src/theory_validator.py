"""
Theory Validator
Checks a trained model against the input-space curvature identities: Hessian
equals Fisher information, PSD-ness, the gradient-norm identity, the
second-order noise expectations, and the loss-change bound.
"""

import logging
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import scipy.integrate
import scipy.linalg

from src.config_loader import VerifyConfig
from src.landscape import (
    LandscapeError,
    LossChangeBound,
    diverse_noise_coefficient,
    fim,
    fim_trace,
    gradnorm_identity_check,
    hessian_ce,
    hutchinson_samples,
    kl_diverse_expectation,
    kl_gauss_expectation,
    logprob_jacobian,
    remainder_slope,
)
from src.models import ParamSet
from src.rng import STREAM_ANALYSIS, NoiseStream

logger = logging.getLogger(__name__)

HessianFn = Callable[[ParamSet, np.ndarray, int], np.ndarray]

PSD_TOL = 1e-8
WEIGHTED_SUM_TOL = 1e-10
BOUND_SLACK = 1e-12
HUTCHINSON_SIGMAS = 4.0
REMAINDER_NORMS = np.logspace(-4, -2, 9)


class TheoryValidator:
    """
    Runs the curvature and noise-expectation checks on a set of inputs.

    Checks:
    - hessian_equals_fim: max entrywise gap between the two matrices
    - fim_psd: symmetry and smallest eigenvalue of the FIM
    - jacobian_weighted_sum: p-weighted log-prob Jacobian rows sum to zero
    - gradnorm_identity: two computations of ||grad_x L||
    - gauss_expectation / diverse_expectation: Monte-Carlo KL vs second order
    - uniform_moment: E[sigma^2 / 2] = sigma_max^2 / 6 by quadrature
    - loss_change_bound: quadratic surrogate never exceeds the bound
    - remainder_order: full-loss remainder shrinks like ||delta||^3
    - hutchinson_trace: Rademacher estimate of Tr(H) vs the exact trace
    """

    def __init__(self, config: VerifyConfig, hessian_fn: Optional[HessianFn] = None):
        """
        Initialize validator with configuration.

        Args:
            config: Tolerances and sample sizes
            hessian_fn: Hessian routine under test; defaults to hessian_ce
        """
        self.config = config
        self.hessian_fn = hessian_fn or hessian_ce

    def validate(self, params: ParamSet, inputs: np.ndarray, labels: np.ndarray) -> Dict[str, Any]:
        """
        Run every check on the first ``n_inputs`` inputs.

        Returns:
            Dictionary with validation results:
            {
                'passed': bool,
                'checks': {
                    'check_name': {'passed': bool, 'message': str, ...}
                },
                'summary': str
            }
        """
        count = min(self.config.n_inputs, len(labels))
        inputs = np.asarray(inputs, dtype=np.float64)[:count]
        labels = np.asarray(labels)[:count]
        stream = NoiseStream(self.config.seed, STREAM_ANALYSIS)

        checks = {
            "hessian_equals_fim": self._check_hessian_fim(params, inputs, labels),
            "fim_psd": self._check_fim_psd(params, inputs),
            "jacobian_weighted_sum": self._check_weighted_sum(params, inputs),
            "gradnorm_identity": self._check_gradnorm(params, inputs, labels),
            "gauss_expectation": self._check_expectation(params, inputs, stream.child(0), diverse=False),
            "diverse_expectation": self._check_expectation(params, inputs, stream.child(1), diverse=True),
            "uniform_moment": self._check_uniform_moment(),
            "loss_change_bound": self._check_bound(params, inputs, labels, stream.child(2)),
            "remainder_order": self._check_remainder(params, inputs, labels, stream.child(3)),
            "hutchinson_trace": self._check_hutchinson(params, inputs, labels, stream.child(4)),
        }
        for name, check in checks.items():
            logger.info("%s: %s", name, "passed" if check["passed"] else "FAILED")

        results = {
            "passed": all(check["passed"] for check in checks.values()),
            "checks": checks,
            "n_inputs": int(count),
        }
        results["summary"] = self._generate_summary(results)
        return results

    def _check_hessian_fim(self, params, inputs, labels) -> Dict[str, Any]:
        gaps = [
            float(np.max(np.abs(self.hessian_fn(params, x, int(y)) - fim(params, x))))
            for x, y in zip(inputs, labels)
        ]
        worst = max(gaps, default=0.0)
        tol = self.config.hessian_tol
        return {
            "passed": worst <= tol,
            "message": f"max |H - G| = {worst:.3e} (tolerance {tol:.1e})",
            "max_gap": worst,
            "tolerance": tol,
        }

    def _check_fim_psd(self, params, inputs) -> Dict[str, Any]:
        min_eig = np.inf
        asymmetry = 0.0
        for x in inputs:
            g = fim(params, x)
            asymmetry = max(asymmetry, float(np.max(np.abs(g - g.T))))
            min_eig = min(min_eig, float(scipy.linalg.eigh(g, eigvals_only=True)[0]))
        min_eig = 0.0 if min_eig == np.inf else min_eig
        passed = min_eig >= -PSD_TOL and asymmetry <= 1e-10
        return {
            "passed": passed,
            "message": f"min eigenvalue {min_eig:.3e}, max asymmetry {asymmetry:.3e}",
            "min_eigenvalue": min_eig,
            "max_asymmetry": asymmetry,
        }

    def _check_weighted_sum(self, params, inputs) -> Dict[str, Any]:
        worst = max(
            (float(np.max(np.abs(logprob_jacobian(params, x).weighted_row_sum()))) for x in inputs),
            default=0.0,
        )
        return {
            "passed": worst <= WEIGHTED_SUM_TOL,
            "message": f"max |sum_k p_k grad log p_k| = {worst:.3e}",
            "max_abs": worst,
        }

    def _check_gradnorm(self, params, inputs, labels) -> Dict[str, Any]:
        k = params.spec.num_classes
        worst = 0.0
        for x, y in zip(inputs, labels):
            worst = max(worst, gradnorm_identity_check(params, x, np.eye(k)[int(y)]).gap)
        tol = self.config.gradnorm_tol
        return {
            "passed": worst <= tol,
            "message": f"max gap {worst:.3e} (tolerance {tol:.1e})",
            "max_gap": worst,
            "tolerance": tol,
        }

    def _check_expectation(self, params, inputs, stream: NoiseStream, diverse: bool) -> Dict[str, Any]:
        cfg = self.config
        ratios: List[float] = []
        skipped = 0
        for i, x in enumerate(inputs):
            if fim_trace(params, x) < cfg.min_trace:
                skipped += 1
                continue
            estimator = kl_diverse_expectation if diverse else kl_gauss_expectation
            mc, analytic = estimator(params, x, cfg.sigma, cfg.mc_samples, stream.child(i))
            ratios.append(mc / analytic)

        if not ratios:
            return {
                "passed": True,
                "message": f"skipped: no input with Tr(G) >= {cfg.min_trace:.1e}",
                "ratios": [],
                "skipped": skipped,
            }
        passed = all(cfg.ratio_low <= r <= cfg.ratio_high for r in ratios)
        return {
            "passed": passed,
            "message": (
                f"MC/analytic ratios in [{min(ratios):.4f}, {max(ratios):.4f}] "
                f"(allowed [{cfg.ratio_low}, {cfg.ratio_high}], {skipped} skipped)"
            ),
            "ratios": ratios,
            "skipped": skipped,
        }

    def _check_uniform_moment(self) -> Dict[str, Any]:
        sigma_max = self.config.sigma
        if sigma_max == 0:
            quadrature = 0.0
        else:
            quadrature, _ = scipy.integrate.quad(lambda s: s * s / 2.0 / sigma_max, 0.0, sigma_max)
        gap = abs(quadrature - diverse_noise_coefficient(sigma_max))
        return {
            "passed": gap <= 1e-15,
            "message": f"|E[sigma^2/2] - sigma_max^2/6| = {gap:.3e}",
            "gap": gap,
        }

    def _check_bound(self, params, inputs, labels, stream: NoiseStream) -> Dict[str, Any]:
        cfg = self.config
        d = params.spec.input_dim
        violations = 0
        worst_margin = -np.inf
        for i, (x, y) in enumerate(zip(inputs, labels)):
            local = stream.child(i)
            directions = local.normal((cfg.perturbations, d))
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
            radii = cfg.delta_max * (1.0 - local.uniform(cfg.perturbations))
            terms = LossChangeBound(params, x, int(y)).evaluate(directions * radii[:, None])
            margin = terms.surrogate_lhs - terms.bound_rhs
            violations += int(np.sum(margin > BOUND_SLACK))
            worst_margin = max(worst_margin, float(margin.max()))
        return {
            "passed": violations == 0,
            "message": f"{violations} violations over {cfg.perturbations} perturbations per input",
            "violations": violations,
            "max_margin": float(worst_margin) if np.isfinite(worst_margin) else None,
        }

    def _check_remainder(self, params, inputs, labels, stream: NoiseStream) -> Dict[str, Any]:
        cfg = self.config
        slopes = []
        for i, (x, y) in enumerate(zip(inputs, labels)):
            direction = stream.child(i).normal(params.spec.input_dim)
            try:
                slopes.append(remainder_slope(params, x, int(y), direction, REMAINDER_NORMS))
            except LandscapeError:
                # locally quadratic (e.g. all-zero weights), nothing to fit
                continue
        if not slopes:
            return {"passed": True, "message": "skipped: remainder vanished", "slopes": []}
        median = float(np.median(slopes))
        return {
            "passed": cfg.slope_low <= median <= cfg.slope_high,
            "message": f"median log-log slope {median:.3f} (allowed [{cfg.slope_low}, {cfg.slope_high}])",
            "slopes": slopes,
            "median_slope": median,
        }

    def _check_hutchinson(self, params, inputs, labels, stream: NoiseStream) -> Dict[str, Any]:
        d = params.spec.input_dim
        worst = 0.0
        for i, (x, y) in enumerate(zip(inputs, labels)):
            h = self.hessian_fn(params, x, int(y))
            samples = hutchinson_samples(lambda v: h @ v, d, self.config.hutchinson_vectors, stream.child(i))
            stderr = samples.std(ddof=1) / np.sqrt(samples.size) if samples.size > 1 else 0.0
            error = abs(samples.mean() - np.trace(h))
            worst = max(worst, error / (stderr + 1e-12))
        return {
            "passed": worst <= HUTCHINSON_SIGMAS,
            "message": f"worst error {worst:.2f} standard errors (allowed {HUTCHINSON_SIGMAS})",
            "max_standard_errors": worst,
        }

    def _generate_summary(self, results: Dict[str, Any]) -> str:
        if results["passed"]:
            return "✓ All theory checks passed"
        failed = [name for name, check in results["checks"].items() if not check["passed"]]
        return f"✗ Theory verification failed: {', '.join(failed)}"

