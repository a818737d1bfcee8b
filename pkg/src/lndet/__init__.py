"""Post-network toolkit for lymph-node detection in T2 MRI.

Bipartite set matching with a focal classification cost, weighted boxes
fusion of multi-epoch ensembles, volume preprocessing, and FROC/mAP
evaluation with size stratification.
"""

from lndet.geometry import BBox, ImageDims, NormBox, area, from_norm, giou, iou, to_norm

__all__ = ["BBox", "ImageDims", "NormBox", "area", "from_norm", "giou", "iou", "to_norm"]
__version__ = "0.1.0"
