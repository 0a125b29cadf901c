"""LC-GAN: image translation for cross-domain instrument segmentation.

Subpackages and modules:

* ``lcgan.diffcomp``  reverse-mode autodiff on numpy with numba kernels
* ``lcgan.imagecore`` netpbm I/O, luminance and mean-pool pyramids
* ``lcgan.networks``  generators, PatchGAN discriminator, segmentor
* ``lcgan.losses``    adversarial, cycle, structural-similarity and seg-consistency terms
* ``lcgan.metrics``   Dice and IoU
* ``lcgan.synthdata`` procedural two-domain dataset
* ``lcgan.training``  optimization loops, checkpoints, inference
* ``lcgan.cli``       the ``lcgan`` command
"""

__version__ = "0.1.0"
