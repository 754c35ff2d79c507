"""Attack-augmented mixing-contrastive pretraining for skeleton sequences.

Momentum-contrast pretraining where hard positives are manufactured by a
gradient-based entropy attack on the input skeleton, and hard negatives by
mixing those positives into an adversarially updated memory bank.
"""

__version__ = "0.1.0"
