"""
moesim - Memory-efficient MoE inference serving simulator

Discrete-event simulation of expert offloading with:
- Synthetic request and routing workloads calibrated to target correlations
- Markov expert prediction with periodic invocation
- Task-aware expert loading under per-layer memory budgets
- SLO-aware admission scheduling
- Sweep runner and mode comparison tables
"""

__version__ = "1.0.0"
__author__ = "moesim Development Team"
