"""Phrase-to-phrase neural machine translation at desk scale.

Source sentences are encoded span by span, a prefix-conditioned attention
picks out source phrases, and training marginalizes exactly over all
target segmentations with a log-space dynamic program. Decoding is
greedy, beam, or greedy with an external phrase dictionary.
"""

__version__ = "0.1.0"
