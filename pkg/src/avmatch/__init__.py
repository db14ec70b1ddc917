"""avmatch: desk-scale audio-visual SFX retrieval pipeline.

Curates audio-frame training pairs from precomputed embeddings, trains
a contrastive projection from audio features into the image-embedding
space, evaluates retrieval, and runs a blinded pairwise preference
study over HTTP.
"""

__version__ = "0.1.0"
