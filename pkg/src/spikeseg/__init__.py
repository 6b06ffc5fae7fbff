"""Spiking semantic segmentation: LIF networks trained with surrogate-gradient BPTT."""

__version__ = "0.1.0"
