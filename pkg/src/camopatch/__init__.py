"""Detection-suppressing adversarial patches that stay perceptually close to
the image region they cover.

The toolkit alternates two updates on a patch placed inside a detection box:
sign-gradient ascent on the detector loss (deception) and gradient descent on
the patch's aggregate CIEDE2000 distance to the covered image segment
(perceptibility), with momentum, schedules and per-iteration RGB clipping.
"""

from camopatch._kernels import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
