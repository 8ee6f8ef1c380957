"""Polyhedral loop-nest autoscheduler: integer sets, schedules, dependence
legality, an interpreter, beam search and a recursive LSTM cost model."""
__version__ = "0.1.0"
