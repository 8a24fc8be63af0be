"""Command-line orchestration: config, stage commands, and report figures."""
