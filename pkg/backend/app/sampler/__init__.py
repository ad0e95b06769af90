"""Adaptive Metropolis-within-Gibbs sampler"""
