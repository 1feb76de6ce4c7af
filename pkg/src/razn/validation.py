"""Input checks shared by the estimator API."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ValidationError
from .pyramid import PatchRef, PyramidDataset


def check_dataset(ds) -> PyramidDataset:
    """Accept an opened dataset or a path to one."""
    if isinstance(ds, PyramidDataset):
        return ds
    if isinstance(ds, (str, Path)):
        return PyramidDataset.open(ds)
    raise ValidationError(f"expected a PyramidDataset or a path, got {type(ds).__name__}")


def check_refs(ds: PyramidDataset, refs: Iterable) -> list[PatchRef]:
    """Coerce to PatchRefs (lists of five ints are accepted) and range-check them."""
    out = []
    for r in refs:
        ref = r if isinstance(r, PatchRef) else PatchRef.from_list(r)
        ds.check_ref(ref)
        out.append(ref)
    if not out:
        raise ValidationError("no patches given")
    return out


def check_image_batch(x, channels: int = 3) -> np.ndarray:
    """``[N, C, H, W]`` float32; uint8 input is mapped to ``[-1, 1]``."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != channels:
        raise ValidationError(f"expected images shaped [N, {channels}, H, W], got {x.shape}")
    if x.dtype == np.uint8:
        return (x.astype(np.float32) / 127.5 - 1.0).astype(np.float32)
    if not np.issubdtype(x.dtype, np.floating):
        raise ValidationError(f"unsupported image dtype {x.dtype}")
    if not np.isfinite(x).all():
        raise ValidationError("images contain non-finite values")
    return x.astype(np.float32, copy=False)


def check_index_mask(mask, num_classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim < 2 or not np.issubdtype(mask.dtype, np.integer):
        raise ValidationError(f"expected an integer mask with >= 2 dims, got {mask.dtype} {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValidationError(f"mask values must lie in [0, {num_classes})")
    return mask
