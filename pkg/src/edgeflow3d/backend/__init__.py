"""Hot-kernel backend selection.

Two interchangeable implementations of the compute kernels exist: a
compiled Cython extension (``_corecy``) and a pure-numpy fallback
(``py_ops``). Their trade-off is measured, not assumed (see
``edgeflow3d bench``): the numpy convolutions ride BLAS and win at the
batched shapes training uses, while the compiled non-maximum suppression
avoids 26 shifted-array passes and wins by an order of magnitude.

The default ``auto`` mode therefore routes per kernel family: convs from
the numpy path, NMS compiled when available. ``EDGEFLOW3D_BACKEND`` (or
:func:`set_backend`) can force a uniform ``compiled`` or ``python``
backend for testing and benchmarking.
"""

from __future__ import annotations

import os
import types

from . import py_ops

_FORCED = os.environ.get("EDGEFLOW3D_BACKEND", "auto")


def _load_compiled():
    from . import _corecy  # noqa: PLC0415

    return _corecy


def _mixed():
    try:
        compiled = _load_compiled()
    except ImportError:
        return py_ops
    return types.SimpleNamespace(
        NAME="auto",
        conv3d_forward=py_ops.conv3d_forward,
        conv3d_grad_input=py_ops.conv3d_grad_input,
        conv3d_grad_weight=py_ops.conv3d_grad_weight,
        nms26=compiled.nms26,
    )


def _select(name: str):
    if name == "python":
        return py_ops
    if name == "compiled":
        return _load_compiled()
    if name == "auto":
        return _mixed()
    raise RuntimeError(f"backend must be auto|compiled|python, got {name!r}")


ops = _select(_FORCED)


def backend_name() -> str:
    return ops.NAME


def available_backends() -> list[str]:
    names = ["python"]
    try:
        _load_compiled()
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


def set_backend(name: str) -> None:
    """Switch the active backend (used by tests and the benchmark)."""
    global ops
    ops = _select(name)
