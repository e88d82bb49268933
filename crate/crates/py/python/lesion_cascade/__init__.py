"""Cascaded liver and liver-lesion CT segmentation.

Volumes and masks are numpy arrays indexed ``[x, y, z]`` in canonical
orientation.
"""

import numpy as np

from . import _native

__all__ = [
    "load_volume",
    "load_mask",
    "save_mask",
    "phantom",
    "describe",
    "param_count",
    "evaluate",
    "predict",
]

describe = _native.describe
param_count = _native.param_count


def _array(dims, values, dtype):
    if isinstance(values, bytes):
        values = np.frombuffer(values, dtype=np.uint8)
    return np.asarray(values, dtype=dtype).reshape(dims, order="F").copy()


def _flat(mask):
    return np.asarray(mask, dtype=np.uint8).ravel(order="F").tobytes()


def load_volume(path):
    """Returns ``(hu, spacing)`` with ``hu`` as float32."""
    dims, spacing, values = _native.load_volume(str(path))
    return _array(dims, values, np.float32), tuple(spacing)


def load_mask(path):
    """Returns ``(mask, spacing)`` with ``mask`` as uint8 in {0, 1}."""
    dims, spacing, values = _native.load_mask(str(path))
    return _array(dims, values, np.uint8), tuple(spacing)


def save_mask(path, mask, spacing=(1.0, 1.0, 1.0)):
    mask = np.asarray(mask)
    _native.save_mask(str(path), mask.shape, list(spacing), _flat(mask))


def phantom(index, size=(64, 64, 64), seed=0, out_dir=None):
    """Synthetic case as a dict with ``image``, ``liver`` and ``lesion`` arrays."""
    if isinstance(size, int):
        size = (size, size, size)
    d = _native.phantom(index, tuple(size), seed, None if out_dir is None else str(out_dir))
    dims = d["dims"]
    return {
        "id": d["id"],
        "spacing": tuple(d["spacing"]),
        "image": _array(dims, d["image"], np.float32),
        "liver": _array(dims, d["liver"], np.uint8),
        "lesion": _array(dims, d["lesion"], np.uint8),
    }


def evaluate(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """Dice, VOE, RVD and surface distances in mm."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return _native.evaluate(_flat(pred), _flat(gt), pred.shape, list(spacing))


def predict(liver_net, lesion_net, volume, out_dir, threshold=0.5, dilate=None, close=None, connectivity=26):
    """Runs both stages on one volume file; returns ``(liver_path, lesion_path, seconds)``."""
    return _native.predict(
        str(liver_net), str(lesion_net), str(volume), str(out_dir), threshold, dilate, close, connectivity
    )
