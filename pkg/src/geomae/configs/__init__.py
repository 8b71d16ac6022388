"""Shipped configuration presets (``desk.cfg``, ``full.cfg``)."""
