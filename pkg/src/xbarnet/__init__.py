"""Train, deploy and simulate binary-crossbar networks on 256x256 neurosynaptic cores."""

__version__ = "0.1.0"
