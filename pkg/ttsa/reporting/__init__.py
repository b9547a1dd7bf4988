"""
TTSA Bilevel Toolkit - Reporting Package

This package contains the output layer:
- writers: CSV, JSON, manifest and summary files
- telemetry: Optional MQTT progress publishing
"""
