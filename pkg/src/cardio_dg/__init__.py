"""HeartBeatAI: SE-ResNet1D with multi-scale concentration and MixStyle for 12-lead ECG arrhythmia classification."""

__version__ = "0.1.0"
