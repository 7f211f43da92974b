# Utility functions package: event logging, error types, output helpers
