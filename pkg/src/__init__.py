"""
Stability Audit - 学習安定性監査エンジン
"""

__version__ = "1.0.0"
__author__ = "Stability Audit Team"
__description__ = "Desk-scale training-stability auditing engine"
