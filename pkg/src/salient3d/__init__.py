"""Salient object discovery on featured SfM point clouds.

Multi-view ViT features are fused onto SfM points, the cloud is bipartitioned
with a Normalized Cut over grouped cosine affinities, and a plane-aligned
oriented box is fitted to the foreground. The resulting pseudo-labels train a
small linear-attention point Transformer. SDF regularizer evaluators and
detection metrics are included for the downstream reconstruction stage.
"""

__version__ = "0.1.0"
