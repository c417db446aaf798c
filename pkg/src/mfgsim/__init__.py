"""Monte Carlo toolkit for regime-modulated mean-field SDEs and games.

Subpackages cover exact chain simulation (:mod:`mfgsim.regime_chain`),
model specification (:mod:`mfgsim.model`, :mod:`mfgsim.families`), particle
and mean-field simulation (:mod:`mfgsim.particle_sim`,
:mod:`mfgsim.mean_field`), convergence metrics (:mod:`mfgsim.metrics`),
adjoint-based optimality verification (:mod:`mfgsim.control`), equilibrium
gap experiments (:mod:`mfgsim.nash`), and the experiment harness / CLI
(:mod:`mfgsim.harness`, :mod:`mfgsim.cli`).
"""

__version__ = "0.1.0"
