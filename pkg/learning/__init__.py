"""
Network inputs, the recurrent predictor, its training loop, baselines and metrics.
"""
