"""
Utilities package for kernel-penalized regression
"""
