"""
Position-attention operator learning package
"""

version = "0.1.0"
