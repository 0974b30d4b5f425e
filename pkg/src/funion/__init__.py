"""Anonymous neural inference over a mixnet: capabilities, storage, buckets, and a simulator."""

__version__ = "0.1.0"
