"""Fine-grained pillar 3D detection: sub-pillar voxelization with height encoding,
DFSA backbone inference, center-heatmap decoding and mAP/mAPH evaluation."""

__version__ = "0.1.0"
