"""Non-intrusive speech quality assessment with a from-scratch BLSTM."""

__version__ = "0.1.0"
