"""Feature-dump exporter: a small vision transformer, sequentially
fine-tuned per task through low-rank adapters, writing row-aligned
(previous-model, current-model) feature views in the FTD dump format."""

from .export import ExportConfig, export_stream
from .losses import kd_losses

__all__ = ["ExportConfig", "export_stream", "kd_losses"]
