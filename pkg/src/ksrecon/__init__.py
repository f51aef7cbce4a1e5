"""Accelerated-acquisition MRI simulation and learned reconstruction toolkit.

Submodules:

- ``ksrecon.tensor``   reverse-mode autodiff engine (numpy-backed)
- ``ksrecon.kspace``   Fourier forward model, sampling masks, zero-filled recon
- ``ksrecon.metrics``  MSE / SSIM / DSSIM / PSNR and the composite training loss
- ``ksrecon.model``    multimodal and unimodal dense U-Net builders
- ``ksrecon.training`` Adam training loop with early stopping and checkpoints
- ``ksrecon.data``     synthetic paired phantoms, raw image I/O, dataset assembly
- ``ksrecon.cli``      command line front end

This module deliberately imports nothing heavy: the CLI must be able to cap
BLAS thread counts via the KSR_THREADS environment variable before numpy is
first imported.
"""

__version__ = "0.1.0"
