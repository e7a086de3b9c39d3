"""Pursuit-evasion game solver toolkit."""
