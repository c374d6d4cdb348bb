"""CT-DNN d-vector speaker verification."""
__version__ = "0.1.0"
