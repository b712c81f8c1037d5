"""segloop: model-in-the-loop segmentation annotation toolkit.

Subpackages cover the shared domain types, mask/box geometry, evaluation
metrics, the lightweight segmentation network with audits, synthetic
oracle adapters, the iterative annotation pipeline, dataset codecs, the
review HTTP service, and the operator CLI.
"""

__version__ = "0.1.0"
