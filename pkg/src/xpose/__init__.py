"""Transpose and rotation transferability lab for gradient-sign attacks."""
