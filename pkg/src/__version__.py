"""Version information for the rerank-cut package."""

__version__ = "0.1.0"
__version_info__ = (0, 1, 0)

# Release information
__author__ = "rerank-cut developers"
__description__ = (
    "Joint reranking and truncation of ranked lists with a shared "
    "self-attention encoder and a greedy step-wise decoder"
)
__url__ = "https://github.com/user/rerank-cut"
