"""
Test modules
"""



