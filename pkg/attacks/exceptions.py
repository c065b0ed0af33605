class AttackError(Exception):
    pass


class ForeignClassMissing(AttackError):
    """The target pool holds no example of a class other than the input's."""


class UntrainedGeneratorError(AttackError):
    pass
