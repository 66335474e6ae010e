"""Desk-scale multilingual sequence-to-sequence framework.

A small numpy-backed autodiff core, an encoder-decoder transformer with an
encoder-side representation splitter and a decoder-side language-feature
encoder, synthetic multilingual corpora, joint training, beam decoding, and
a zero-shot evaluation harness (BLEU, off-target rate, representation
analysis).
"""

__version__ = "0.1.0"
