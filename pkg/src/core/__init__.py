"""
Model, losses, decoding, training and evaluation logic.
"""
