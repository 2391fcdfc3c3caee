"""Desk-scale toolkit for converting MHA transformers into GQA transformers.

Pipeline stages: calibrate (collect KV caches), analyze (pairwise head
similarity before/after optimal alignment), group (partition heads),
transform (fuse alignment transforms into the weights without changing the
model function), prune (gated transfer onto shared group heads with
distillation), and export of a standard GQA checkpoint.
"""

__version__ = "0.1.0"
