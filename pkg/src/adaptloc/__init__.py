"""Domain-adaptive spatio-temporal action localization on synthetic video.

Subpackages are imported directly, e.g. ``from adaptloc import core`` or
``from adaptloc.evaluation import frame_ap``.
"""

__version__ = "0.1.0"
