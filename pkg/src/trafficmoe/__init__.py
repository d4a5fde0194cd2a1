"""Sparse mixture-of-experts modeling for network traffic.

Pipeline: packet captures -> session flows -> hex bigram token
sequences -> causal transformer with routed experts -> training,
evaluation, and efficiency benchmarking.
"""

__version__ = "0.1.0"
