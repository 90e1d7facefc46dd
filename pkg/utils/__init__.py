# utils/__init__.py
# This file makes the utils directory a Python package
