"""Figure rendering for channel-sounder simulation outputs."""

from .render import PLOT_KINDS, PlotJob, SchemaError, render

__version__ = "0.1.0"
