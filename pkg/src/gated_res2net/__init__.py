"""Channel-wise gated Res2Net toolkit for synthetic-speech anti-spoofing."""

__version__ = "0.1.0"
