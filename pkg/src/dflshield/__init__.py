"""dflshield: a desk-scale decentralized federated learning security testbed.

Simulates a peer-to-peer federation whose participants train locally,
exchange model parameters, and aggregate by federated averaging, under
three security settings: plaintext baseline, hybrid-encrypted exchange,
and encryption combined with moving target defense (random neighbor
sampling plus ip:port rotation). Ships the matching adversaries
(eavesdropper, network mapper, eclipse attacker) and a scenario harness
that measures the security/performance trade-off.
"""

__version__ = "0.1.0"
