"""
sgkit - interaction-aware open-vocabulary scene graph toolkit.

Framework-free mechanisms: bidirectional-prompt target generation, two-step
interaction-guided query selection, Hungarian matching, relation-aware
distillation losses, triplet recall metrics and a synthetic scenario
generator with planted ground truth.
"""

__version__ = '0.1.0'
