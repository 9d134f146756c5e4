"""
Models package for kernel-penalized regression
"""
