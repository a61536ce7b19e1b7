"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension ``_ckernels`` is used when it was built and importable.
Set ``SPARSETRACK_PURE_PYTHON=1`` to force the numpy fallback. ``BACKEND``
names the active implementation; ``use_backend`` switches it at runtime
(tests and the benchmark compare both).
"""

import os

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNEL_NAMES = (
    "gelu_tanh",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "index_add_rows",
    "top1_dispatch",
    "last_writer_map",
    "rasterize_disks",
)

BACKEND = "python"


def available_backends():
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def use_backend(name):
    """Bind the module-level kernel names to ``"compiled"`` or ``"python"``."""
    global BACKEND
    if name == "compiled":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        source = _ckernels
    elif name == "python":
        source = _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for kname in KERNEL_NAMES:
        g[kname] = getattr(source, kname)
    BACKEND = name


def get_kernel(name, backend=None):
    """Look a kernel up on a specific backend without switching the global one."""
    if backend is None:
        return globals()[name]
    source = _ckernels if backend == "compiled" else _fallback
    if source is None:
        raise ImportError("compiled kernels are not built")
    return getattr(source, name)


if _ckernels is not None and os.environ.get("SPARSETRACK_PURE_PYTHON", "") not in ("1", "true"):
    use_backend("compiled")
else:
    use_backend("python")
