"""
Logging Package
Structured logging for the shell lab

- Structured JSON or console logs (structlog)
- Context binding per study
- Operation timing (LogTimer)
"""
