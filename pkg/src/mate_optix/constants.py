"""Physical constants used throughout the package (SI units)."""

C = 299792458.0  # speed of light (m/s), exact
HBAR = 1.054571817e-34  # reduced Planck constant (J s)
