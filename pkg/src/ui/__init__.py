"""
Console rendering and logging setup.
"""
