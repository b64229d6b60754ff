"""Backdoor detection: t-SNE, PCA, linear SVM and Mahalanobis scoring on hidden features."""

from .detect import (DETECTION_THRESHOLD, MODES, RESPONSE_SHIFT_THRESHOLD, DetectionReport, DetectorConfig,
                     detect_backdoor, detect_features, export_csv, stratified_split, trigger_response)
from .mahalanobis import MahalanobisBaseline, mahalanobis_detect, mahalanobis_distances, mahalanobis_fit
from .pca import PcaProjection, pca_fit, pca_inverse, pca_transform
from .svm import SvmModel, svm_objective, svm_predict, svm_train
from .tsne import Embedding, conditional_affinities, joint_affinities, kl_divergence, tsne_embed

__all__ = [
    "DETECTION_THRESHOLD", "MODES", "RESPONSE_SHIFT_THRESHOLD", "DetectionReport", "DetectorConfig",
    "detect_backdoor", "detect_features", "export_csv", "stratified_split", "trigger_response",
    "MahalanobisBaseline", "mahalanobis_detect", "mahalanobis_distances", "mahalanobis_fit",
    "PcaProjection", "pca_fit", "pca_inverse", "pca_transform",
    "SvmModel", "svm_objective", "svm_predict", "svm_train",
    "Embedding", "conditional_affinities", "joint_affinities", "kl_divergence", "tsne_embed",
]
