"""
Test suite for the rerank-cut package.
"""
