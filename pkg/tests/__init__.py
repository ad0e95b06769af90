"""Test suite for the snow density engine"""
