"""Multi-pattern passenger flow prediction for bus networks.

Smart-card rides are matched to stop events, passengers are clustered on a
sharing-stop graph, one spatio-temporal graph model is trained per
mobility pattern and their forecasts are summed. Route reassignment then
uses the forecast to even out per-stop load.
"""

__version__ = "0.1.0"
