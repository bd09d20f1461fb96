"""
Synthetic scene generation, rigid-box physics and velocity-sequence labels.
"""
