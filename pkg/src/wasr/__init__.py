"""Water-scene segmentation and obstacle detection, desk scale.

Encoder-decoder network with IMU-horizon fusion, water-obstacle feature
separation training, segmentation post-processing, and the detection
evaluation protocol, all on a procedural synthetic dataset.
"""

__version__ = "0.1.0"
