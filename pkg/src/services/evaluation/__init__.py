# src/services/evaluation/__init__.py
