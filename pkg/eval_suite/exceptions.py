class EvaluationError(ValueError):
    pass


class NonConvergenceWarning(UserWarning):
    """An iterative probe stopped early or fell back to a degenerate direction."""
