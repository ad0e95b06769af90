"""Posterior inference: WAIC, kriging, prediction and summaries"""
