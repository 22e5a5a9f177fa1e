"""
Plant, solver, blending, intent and task modules
"""
