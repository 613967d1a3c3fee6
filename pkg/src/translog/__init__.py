"""Transparency-log toolkit.

History trees, a verifiable log-backed map, a Merkle sum tree, sanitisation
with differential-privacy budgets, role-gated release and query, a gossip
and witness simulation, durable storage, and the ``translog`` CLI.
"""

__version__ = "0.1.0"
