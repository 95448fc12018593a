"""Configuration-level diversity: mean pairwise cosine distance between reports."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..backends import Embedder, cosine_matrix
from ..report import Report


def report_text(report: Report) -> str:
    return f"{report.title}\n{report.summary}"


def diversity_from_vectors(vectors: np.ndarray) -> Optional[float]:
    """Mean of 1 - cosine over unordered pairs; None below two vectors."""
    n = len(vectors)
    if n < 2:
        return None
    sims = cosine_matrix(vectors, vectors)
    iu = np.triu_indices(n, k=1)
    return float(np.mean(1.0 - sims[iu]))


def diversity(reports: Sequence[Report], embedder: Embedder) -> Optional[float]:
    if len(reports) < 2:
        return None
    return diversity_from_vectors(np.asarray(embedder.embed([report_text(r) for r in reports])))
