"""Modified Kahler-Ricci flow on flat complex tori, with an elliptic limit solver."""

__version__ = "0.1.0"
