"""Deep sparse Conformer encoder: ProbSparse attention with relative positions and DeepNorm residuals."""
