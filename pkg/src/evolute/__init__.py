"""Two-stream imitation learning: classifier heads for discrete actions,
an energy model for continuous ones, plus the toy arena they are trained in."""

__version__ = "0.1.0"
