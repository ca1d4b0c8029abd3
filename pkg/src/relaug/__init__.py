"""Retrieval-augmented discovery of latent predicate labels.

A desk-scale engine for long-tailed relation classification: a prototype
encoder, a frozen cosine-retrieval memory bank, inconsistency-gated
multi-label augmentation with inverse-propensity sampling, multi-prototype
training and PredCls-style evaluation, plus a seeded synthetic benchmark
with a known latent-label oracle.
"""

__version__ = "0.1.0"
