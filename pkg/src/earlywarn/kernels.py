"""Select the compiled kernels when built, the numpy ones otherwise.

Set ``EARLYWARN_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
best_split = _pykernels.best_split
tree_apply = _pykernels.tree_apply

if os.environ.get("EARLYWARN_PURE_PYTHON") != "1":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        best_split = _ckernels.best_split
        tree_apply = _ckernels.tree_apply
