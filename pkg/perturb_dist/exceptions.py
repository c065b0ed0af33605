class DistributionError(ValueError):
    """Distribution parameters or samplers that cannot be used as given."""
