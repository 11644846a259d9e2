"""Cycle-level simulator of a 4-core banked int8 convolution IP core."""
