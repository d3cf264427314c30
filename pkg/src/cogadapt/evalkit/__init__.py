from .metrics import (
    Prediction,
    accuracy,
    auroc,
    f1_from_counts,
    macro_f1,
    pearson_cc_per_lead,
    rmse_per_lead,
)
from .reporting import SubjectSummary, fold_report, subject_summary
from .splits import EarlyStopState, Fold, SplitPlan, early_stop_observe, kfold_split, loso_split

__all__ = [
    "Prediction", "accuracy", "auroc", "f1_from_counts", "macro_f1",
    "pearson_cc_per_lead", "rmse_per_lead", "SubjectSummary", "fold_report",
    "subject_summary", "EarlyStopState", "Fold", "SplitPlan", "early_stop_observe",
    "kfold_split", "loso_split",
]
