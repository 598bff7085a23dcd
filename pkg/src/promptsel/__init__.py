"""In-context example selection for low-resource languages.

Pipeline: pick related auxiliary example banks by mean-embedding similarity,
train language-specific retrievers and merge them by alternating
minimization, then fine-tune for diversity and retrieve
relevant-plus-diverse demonstration subsets with a DPP and greedy MAP
inference.
"""

from ._core import BACKEND, COMPILED

__version__ = "0.1.0"

__all__ = ["BACKEND", "COMPILED", "__version__"]
