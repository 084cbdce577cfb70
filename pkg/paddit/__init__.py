"""PADDIT: probabilistic augmentation of data using diffeomorphic image transformation."""
