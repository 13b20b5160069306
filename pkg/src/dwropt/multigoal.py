"""Combination of several goal functionals into one error functional.

Per-goal deviations from enriched reference evaluations are scaled by
the inverse magnitude of the goal at a freeze point and summed, which
prevents cancellation between goals.  The absolute values in that sum
are made differentiable by freezing their signs at the freeze point;
signs and weights are refreshed whenever the freeze point moves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WeightDegeneracyError


def weighting_default(x, m):
    """Sum of componentwise relative deviations: sum x_l / |m_l|.

    Strictly monotone in each component of x and zero at x = 0.  A zero
    weight is rejected; callers fall back to absolute weighting.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if np.any(x < 0):
        raise WeightDegeneracyError("deviations must be nonnegative")
    if np.any(m == 0.0):
        raise WeightDegeneracyError(
            "zero weighting value; use absolute weighting (|m_l| := 1) instead"
        )
    return float(np.sum(x / np.abs(m)))


@dataclass(frozen=True)
class CombinedGoal:
    """Sign-frozen differentiable realization of the combined functional.

    value(u, q) = sum_l s_l (r_l - I_l(u, q)) / w_l  with r_l evaluated on
    enriched spaces, w_l = |I_l(freeze)| (or 1 on degeneracy) and s_l the
    deviation sign at the freeze point.  At the freeze point the value
    coincides with the absolute-value form exactly.
    """

    goals: tuple
    refs: tuple
    freeze_values: tuple
    weights: tuple
    signs: tuple
    fallback_used: bool
    name: str = "combined"
    reference: None = None

    @property
    def iu_terms(self):
        terms = []
        for goal, s, w in zip(self.goals, self.signs, self.weights):
            for scale, fields, region in goal.iu_terms:
                terms.append((-s / w * scale, fields, region))
        return tuple(terms)

    @property
    def iq_terms(self):
        terms = []
        for goal, s, w in zip(self.goals, self.signs, self.weights):
            for scale, fields, region in goal.iq_terms:
                terms.append((-s / w * scale, fields, region))
        return tuple(terms)

    def value(self, u, q):
        return float(
            sum(
                s * (r - g.value(u, q)) / w
                for g, r, s, w in zip(self.goals, self.refs, self.signs, self.weights)
            )
        )

    def value_at_freeze(self):
        """Combined relative deviation at the freeze point (nonnegative)."""
        return float(
            sum(
                abs(r - f) / w
                for r, f, w in zip(self.refs, self.freeze_values, self.weights)
            )
        )

    def relative_deviations(self):
        """Per-goal |r_l - I_l(freeze)| / w_l."""
        return tuple(
            abs(r - f) / w
            for r, f, w in zip(self.refs, self.freeze_values, self.weights)
        )

    def reference_error(self):
        """Combined-functional error against the member reference values.

        Equals value(exact) - value(freeze); None when any member lacks a
        reference value.
        """
        if any(g.reference is None for g in self.goals):
            return None
        return float(
            sum(
                s * (f - g.reference) / w
                for g, f, s, w in zip(
                    self.goals, self.freeze_values, self.signs, self.weights
                )
            )
        )

    def refreeze(self, u, q):
        """Same references, signs and weights refrozen at (u, q)."""
        return _freeze(self.goals, self.refs, u, q)


def _freeze(goals, refs, u_freeze, q_freeze):
    freeze_values = tuple(g.value(u_freeze, q_freeze) for g in goals)
    weights = []
    signs = []
    fallback = False
    for r, f in zip(refs, freeze_values):
        w = abs(f)
        if w == 0.0:
            w = 1.0
            fallback = True
        weights.append(w)
        signs.append(1.0 if r - f >= 0.0 else -1.0)
    return CombinedGoal(
        goals=tuple(goals),
        refs=tuple(refs),
        freeze_values=freeze_values,
        weights=tuple(weights),
        signs=tuple(signs),
        fallback_used=fallback,
    )


def build_combined(goals, enriched_eval, freeze_eval):
    """Combined goal from enriched reference and freeze-point evaluations."""
    u2, q2 = enriched_eval
    uf, qf = freeze_eval
    refs = tuple(g.value(u2, q2) for g in goals)
    if not all(np.isfinite(refs)):
        raise WeightDegeneracyError("non-finite enriched goal evaluation")
    return _freeze(goals, refs, uf, qf)
