"""
Configuration Package
Handles all application configuration and environment variables.

Generated by inquantic-foundry
"""