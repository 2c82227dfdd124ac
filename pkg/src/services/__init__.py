# src/services/__init__.py 