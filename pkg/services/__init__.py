"""
Services package for kernel-penalized regression
"""
