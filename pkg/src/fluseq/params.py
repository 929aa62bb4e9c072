"""Generic traversal of parameter dataclasses.

Model parameters are nested dataclasses whose array-valued fields hold
float64 numpy arrays.  ``iter_named_arrays`` walks them in declared field
order (deterministic, which the optimizer and checkpoints rely on), and
``bind`` produces a parallel structure whose arrays are tape leaves (or
untracked constants when ``tape`` is None, for inference).
"""

import copy
import dataclasses

import numpy as np

from fluseq.autodiff import Tensor


def iter_named_arrays(obj, prefix=""):
    """Yield (dotted_name, leaf) pairs for every array/Tensor field."""
    if isinstance(obj, (np.ndarray, Tensor)):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_named_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_named_arrays(item, f"{prefix}[{i}]")
    # scalars/strings/None carry no parameters


def bind(obj, tape):
    """Rebuild the structure with arrays wrapped as tensors (no copies)."""
    if isinstance(obj, np.ndarray):
        return tape.leaf(obj) if tape is not None else Tensor(obj)
    if dataclasses.is_dataclass(obj):
        kwargs = {
            f.name: bind(getattr(obj, f.name), tape) for f in dataclasses.fields(obj)
        }
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [bind(item, tape) for item in obj]
    if isinstance(obj, tuple):
        return tuple(bind(item, tape) for item in obj)
    return obj


def clone(obj):
    """Deep copy of a parameter structure (arrays included)."""
    return copy.deepcopy(obj)
