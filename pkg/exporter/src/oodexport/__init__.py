"""Feature and logit dumps from image classifiers, in the sectioned container format."""

from oodexport.export import ExportError, ExportJob, ExportSummary

__all__ = ["ExportError", "ExportJob", "ExportSummary", "export"]
