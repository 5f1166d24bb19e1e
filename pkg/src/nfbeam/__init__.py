"""Binaural beamforming toolkit with near-field low-frequency ILD enhancement.

Subpackages:
    sphere   -- rigid-sphere pressure model, DVF and the ILD scaling factor
    scene    -- acoustic scenes, steering vectors, mixing, noise CPSDs
    stft     -- sqrt-Hann analysis/synthesis at 50% overlap
    beamform -- BMVDR, JBLCMV and the band-split ILD-enhancing beamformer
    sdp      -- lifted semidefinite relaxations, rank-1 recovery, QCQP oracle
    metrics  -- interaural cue errors and output-noise-power reporting
    cli      -- command-line pipeline (dvf-table, simulate, beamform, evaluate)
"""

__version__ = "0.1.0"
