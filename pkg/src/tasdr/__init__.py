"""Desk-scale dense-retrieval training with topic-aware, margin-balanced
batch sampling, dual-teacher distillation, exact inner-product retrieval,
and TREC-style evaluation."""

__version__ = "0.1.0"
