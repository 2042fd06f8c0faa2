"""Experiment harnesses: bars test, noise-type selection, and patch denoising."""
