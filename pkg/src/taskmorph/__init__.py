"""Privacy-aware task-specific feature generation for split multi-task learning.

A producer trains a shared encoder plus one channel-attention morphing module
per task, under two privacy regimes: differentially private updates of the
producer-side parameters (input obfuscation) and a structural-similarity
penalty that pushes per-task features apart (task privacy). Producer and
consumer can run as separate parties over a framed byte protocol.
"""

__version__ = "0.1.0"
