"""
Throw Assist - Source Package
"""
