"""Geometry-conditioned WiFi CSI 3D pose estimation toolkit.

Subpackages cover the full pipeline: SE(3) calibration and coordinate
unification (:mod:`rfpose.geometry`), a finite-path synthetic CSI simulator
(:mod:`rfpose.rfsim`), CSI-ratio preprocessing and feature maps
(:mod:`rfpose.csi`), geometry/temporal token encoding (:mod:`rfpose.encode`),
a from-scratch conditioned transformer regressor (:mod:`rfpose.net` on top
of :mod:`rfpose.autograd`), training/evaluation protocols
(:mod:`rfpose.train`, :mod:`rfpose.dataset`), and file formats plus the CLI
(:mod:`rfpose.dataio`, :mod:`rfpose.cli`).
"""

from . import autograd, csi, dataio, dataset, encode, geometry, net, rfsim, train
from .cli import cli

__version__ = "0.1.0"

__all__ = ["autograd", "csi", "dataio", "dataset", "encode", "geometry", "net",
           "rfsim", "train", "cli", "__version__"]
