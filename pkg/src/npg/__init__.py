"""Neural parametric Gaussians: a low-rank coarse point model drives 3D
Gaussians anchored in local volumes, fitted from a monocular sequence."""

__version__ = "0.1.0"
