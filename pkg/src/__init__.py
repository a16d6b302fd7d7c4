"""
Joint reranking and truncation package.
"""
