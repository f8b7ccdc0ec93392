"""
Semi-Decentralized Federated Ego-Graph Recommendation Simulator

Deterministic desk-scale simulation of devices that keep private ego
graphs, a server that co-clusters users and items into groups glued by
fake common items, device-to-device propagation and LDP-protected uploads.
"""

__version__ = "0.1.0"
__description__ = "Simulator for semi-decentralized federated ego-graph recommendation"
