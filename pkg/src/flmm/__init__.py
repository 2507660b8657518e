"""Federated adapter-fusion simulator: a desk-scale multi-party framework
for domain-adapting a frozen two-tower vision-language toy model by
exchanging only low-rank adapter updates."""

__version__ = "0.1.0"
