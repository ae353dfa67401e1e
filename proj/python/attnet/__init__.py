"""Attention-augmented CNN experiments.

Thin re-export of the _attnet extension. NumPy float64 arrays cross the
boundary by copy; networks and training state live on the C++ side.
"""

try:
    from ._attnet import *  # noqa: F401,F403  (installed layout)
    from ._attnet import __version__, __doc__ as _core_doc  # noqa: F401
except ImportError:  # build-tree layout: extension directory on sys.path
    from _attnet import *  # noqa: F401,F403
    from _attnet import __version__, __doc__ as _core_doc  # noqa: F401
