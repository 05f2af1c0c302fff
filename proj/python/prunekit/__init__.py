"""Learnable structured pruning for a desk-scale FastSpeech-2-style transformer.

Thin python surface over the C++ core: hard-concrete gate math, model
construction and forward passes, the four prune/fine-tune pipelines, physical
compaction, and checkpoint/report IO.
"""

try:
    from ._prunekit import *  # noqa: F401,F403
    from ._prunekit import __doc__ as _core_doc  # noqa: F401
except ImportError:  # extension built out-of-package (plain cmake build)
    from _prunekit import *  # noqa: F401,F403

__version__ = "0.1.0"
