"""Two-stage differentially private conditional VAE training.

Stage 1 pre-trains a pool of encoders non-privately on disjoint subsets of the
private data; Stage 2 trains a freshly initialized decoder with clipped, noised
gradients. Only the decoder is released, and its privacy cost is tracked with
a Renyi-DP accountant.
"""

__version__ = "0.1.0"
