"""Run orchestration"""
