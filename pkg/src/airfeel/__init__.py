"""Power control and convergence analysis for over-the-air federated
edge learning.

Subpackages:
    dataset      synthetic ridge-regression data and learning constants
    channel      fading channel draws and over-the-air aggregation
    convergence  learning-rate schedules and optimality-gap bounds
    power        power-control solvers, benchmark policies and diagnostics
    experiment   end-to-end training loop, Monte-Carlo harness and exports
"""

__version__ = "0.1.0"
