"""Input validation shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError


def check_inputs(X, *, image: bool | None = None):
    """Finite float64 array, 2-D for tabular data or 4-D ``(n, C, H, W)`` for images."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True)
    if image is True and X.ndim != 4:
        raise DataError(f"image models expect (n, C, H, W) inputs, got shape {X.shape}")
    if image is False and X.ndim != 2:
        raise DataError(f"tabular models expect (n, d) inputs, got shape {X.shape}")
    if X.ndim not in (2, 4):
        raise DataError(f"inputs must be 2-D or 4-D, got shape {X.shape}")
    return X


def check_binary_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 (normal) or 1 (anomaly)")
    if (y == 0).sum() == 0 or (y == 1).sum() == 0:
        raise DataError("training needs at least one normal and one anomalous example")
    return y.astype(np.int64)


def check_feature_shape(X, expected, what="model"):
    got = tuple(X.shape[1:])
    if got != tuple(expected):
        raise DataError(f"{what} was fitted on inputs of shape {tuple(expected)}, got {got}")


def parse_stages(stages):
    """Accept 3, "12", "1,2,3" or an iterable of ints; returns a sorted tuple."""
    if isinstance(stages, (int, np.integer)):
        out = tuple(range(1, int(stages) + 1))
    elif isinstance(stages, str):
        out = tuple(int(c) for c in stages.replace(",", "").replace(" ", ""))
    else:
        out = tuple(int(s) for s in stages)
    if not out or any(s not in (1, 2, 3) for s in out) or len(set(out)) != len(out):
        raise ValueError(f"invalid stage selection {stages!r}")
    return tuple(sorted(out))
