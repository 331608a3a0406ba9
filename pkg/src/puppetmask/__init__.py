"""Universal per-action adversarial masks for steering neural policies.

A precomputed mask per action, added to raw observations only, drives a
victim Q-policy to follow an arbitrary target policy in real time.
Includes FGSM baselines, a black-box ensemble variant, a toy pixel
environment with trained DQN policies, and an evaluation harness
measuring attack success rate against behavior matching.
"""

__version__ = "0.1.0"

from .backends import BACKEND

__all__ = ["BACKEND", "__version__"]
