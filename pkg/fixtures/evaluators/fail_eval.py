#!/usr/bin/env python3
"""Stub evaluator that always fails, for error-path testing."""
import sys

print("benchmark harness exploded", file=sys.stderr)
sys.exit(1)
