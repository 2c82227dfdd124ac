# src/services/inertial/__init__.py
