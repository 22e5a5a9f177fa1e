"""
Utility modules
"""



