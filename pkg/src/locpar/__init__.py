"""locpar: interpreter and layout analyzer for a parallel location calculus."""

__version__ = "0.1.0"
