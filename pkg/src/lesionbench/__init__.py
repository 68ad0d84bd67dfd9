"""Transfer-learning benchmark harness for binary skin-lesion classification.

Submodules are imported on demand; importing the package itself does not load
TensorFlow.
"""

__version__ = "0.1.0"
