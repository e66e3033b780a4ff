"""physio_mae: multimodal masked autoencoder for ECG, PPG and ABP."""

version = "0.1.0"
