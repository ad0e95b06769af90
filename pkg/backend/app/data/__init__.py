"""Core datasets: loading, saving and simulation"""
