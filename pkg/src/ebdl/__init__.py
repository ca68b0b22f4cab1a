"""Energy-based density learning at desk scale.

Time-dependent energy-based models trained with a joint denoising
score-matching + noise-level classification objective, checked against
closed-form Gaussian-mixture ground truth, and put to work in SMC-based
sampling, model composition, and free-energy estimation.
"""

__version__ = "0.1.0"
