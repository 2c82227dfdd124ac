# src/services/learning/__init__.py
