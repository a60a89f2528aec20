"""Knowledge-guided action anticipation on a from-scratch numpy autograd stack."""
__version__ = "0.1.0"
