"""
Loss-matrix testbed for class-incremental learning.

Builds pairwise loss matrices for discriminative and generative classifiers
trained under continual-learning strategies, and separates task confusion
(off-diagonal task blocks) from catastrophic forgetting (growth of diagonal
task blocks after later tasks).
"""

__version__ = "0.1.0"
