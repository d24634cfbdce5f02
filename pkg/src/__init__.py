"""Change-of-variable construction for uniformly convergent Fourier partial sums."""
