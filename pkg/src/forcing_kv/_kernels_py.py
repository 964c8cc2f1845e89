"""Pure numpy kernels. Reference fallback for the compiled ``_ckernels`` module.

Inputs are float64 C-contiguous arrays; the selector in ``kernels`` does the
conversion. ``bias`` is an additive per-key logit term (``-inf`` masks a key).
"""

from __future__ import annotations

import numpy as np


def _weights(q: np.ndarray, k: np.ndarray, bias: np.ndarray) -> np.ndarray:
    logits = (q @ k.T) / np.sqrt(q.shape[1]) + bias[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return _weights(q, k, bias) @ v


def attention_weights(q: np.ndarray, k: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return _weights(q, k, bias)


def region_mass(
    q: np.ndarray, k: np.ndarray, bias: np.ndarray, labels: np.ndarray, n_regions: int
) -> np.ndarray:
    per_key = _weights(q, k, bias).sum(axis=0)
    return np.bincount(labels, weights=per_key, minlength=n_regions).astype(np.float64)


def segment_cosine(prev: np.ndarray, new: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    out = np.zeros(len(bounds) - 1)
    for j in range(len(bounds) - 1):
        a = prev[bounds[j] : bounds[j + 1]].ravel()
        b = new[bounds[j] : bounds[j + 1]].ravel()
        denom = np.sqrt(a @ a) * np.sqrt(b @ b)
        if denom > 0.0:
            out[j] = min(1.0, max(-1.0, (a @ b) / denom))
    return out


def bottomk(sims: np.ndarray, k: int) -> np.ndarray:
    # lexsort: last key is primary, so similarity first, then segment index.
    order = np.lexsort((np.arange(len(sims)), sims))
    return np.sort(order[:k]).astype(np.int64)
