"""Adversarial selective-cutting anomaly segmentation.

A dual-decoder encoder network splits each image into a "fence" cut that a
discriminator must accept as belonging to a reference set of normal images
and a complementary "wild" cut; a 1x1 reconstructor recombines them, and a
histogram-peak threshold on the reconstruction yields the anomaly mask.
"""

__version__ = "0.1.0"
