"""
Reporting package for the robustness experiments.
"""

from .experiment_report import ExperimentReportGenerator, convert_types, load_eval_report

__all__ = ["ExperimentReportGenerator", "convert_types", "load_eval_report"]
