"""physio_mae tests suite."""
