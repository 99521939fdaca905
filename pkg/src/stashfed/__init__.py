"""Chunked, cache-fronted data federation: origins, redirector, caches, client and simulator."""

__version__ = "0.1.0"
