"""
PSCDAE workbench: synthetic ZigBee fingerprints, partially stacked preambles
and a convolutional denoising autoencoder classifier.
"""
import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
