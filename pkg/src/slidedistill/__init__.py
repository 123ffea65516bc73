"""Online multi-modal knowledge distillation for pathology-bag biomarker prediction.

Two teacher branches (genomic, fused multi-modal) and one pathology student
are co-trained with covariance-alignment, orthogonality, similarity-preserving
and mutual-KL losses, so that at inference the student predicts biomarker
status from bag features alone.
"""

__version__ = "0.1.0"
