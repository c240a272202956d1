"""Scene flow between two point clouds with bidirectional feature propagation.

Modules, bottom up: ``numeric`` (tape autodiff), ``geometry``, ``layers``,
``model``, ``training``, ``metrics``, ``synthdata``, ``bench``, ``fileio`` and
the ``cli`` entry point.
"""

__version__ = "0.1.0"
