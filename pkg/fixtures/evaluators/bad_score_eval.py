#!/usr/bin/env python3
"""Stub evaluator printing an out-of-range score, for validation testing."""
import json

print(json.dumps({"tasks": {"a": 101.0}}))
