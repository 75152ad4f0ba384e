"""Feature-field Gaussian splatting on frozen geometry.

Renders, trains, and queries per-Gaussian language features: hierarchical
mask embeddings are compressed by a scene autoencoder, splatted as low-dim
latent images, and queried with open-vocabulary relevancy maps.
"""

__version__ = "0.1.0"
