"""
Input/Output for ranking datasets, configs, checkpoints and reports.
"""
