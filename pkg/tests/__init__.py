"""
Test suite for the hdg_audit package.
"""
