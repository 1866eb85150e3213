"""Two-stage bone / lesion-risk cascade for longitudinal whole-body MRI, on numpy."""

__version__ = "0.1.0"
