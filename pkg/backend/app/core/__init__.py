"""Model core: physics, smoothing, spatial covariance and likelihood"""
