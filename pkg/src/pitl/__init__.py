"""Recurrent networks, transfer learning and a physics-informed objective
for dissolved-oxygen prediction in activated-sludge plants."""

__version__ = "0.1.0"
