"""
gossiplab

Discrete-event simulator of Bitcoin peer-to-peer gossip plus the toolkit used to study
client deanonymization on top of it: entry-node fingerprinting, transaction-origin
matching, topology probing, the analytic success/cost models and the alternative-chain
difficulty planner.
"""

__version__ = "0.3.0"
