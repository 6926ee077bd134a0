"""Evaluation protocols: retrieval, classification, captioning metrics."""
from .captionmetrics import bleu4, cider, corpus_bleu4, corpus_rouge_l, rouge_l, round_robin_eval
from .classify import (ClassifierHead, ClassifierTrainConfig, evaluate_classifier, train_classifier,
                       zero_shot_classify)
from .report import MetricReport
from .retrieval import accuracy, mean_average_precision, recall_at_k, retrieval_report

__all__ = [
    "ClassifierHead", "ClassifierTrainConfig", "MetricReport", "accuracy", "bleu4", "cider",
    "corpus_bleu4", "corpus_rouge_l", "evaluate_classifier", "mean_average_precision", "recall_at_k",
    "retrieval_report", "rouge_l", "round_robin_eval", "train_classifier", "zero_shot_classify",
]
