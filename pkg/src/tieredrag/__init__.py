"""Tiered CPU/accelerator IVF retrieval with SLO-aware index partitioning."""
