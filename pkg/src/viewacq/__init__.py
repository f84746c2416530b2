"""Budget-constrained active view acquisition for joint AS / LVEF diagnosis."""

__version__ = "0.1.0"
