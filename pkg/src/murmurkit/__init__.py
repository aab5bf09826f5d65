"""Heart-murmur detection from phonocardiograms.

Pipeline: WAV recordings -> 3 s log-Mel segments -> two-branch
attention/convolution encoder -> MC-dropout class distributions ->
temperature-scaled calibration -> record- and patient-level decisions,
scored by weighted accuracy, macro-F1, and expected calibration error.
"""

__version__ = "0.1.0"
