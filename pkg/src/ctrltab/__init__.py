"""Controlled table-to-text workbench: corpus building, knowledge retrieval,
description generation, evaluation, and annotation verification."""

__version__ = "0.1.0"
