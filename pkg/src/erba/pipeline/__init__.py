"""Data, synthetic generation, training, evaluation and persistence."""
