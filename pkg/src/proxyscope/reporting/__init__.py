from ._kernels import BACKEND, grouped_counts
from .aggregate import (
    PrevalenceRow,
    RecordBatch,
    distinct_key_counts,
    export_heatmap,
    prevalence_by,
    round_half_up,
    rows_to_csv,
    rows_to_text,
)
from .campaign import CampaignSummary, replay_spool, run_campaign

__all__ = [
    "BACKEND",
    "CampaignSummary",
    "PrevalenceRow",
    "RecordBatch",
    "distinct_key_counts",
    "export_heatmap",
    "grouped_counts",
    "prevalence_by",
    "replay_spool",
    "round_half_up",
    "rows_to_csv",
    "rows_to_text",
    "run_campaign",
]
