"""Exception hierarchy.

Validation errors map to CLI exit code 2, numerical failures to exit code 3.
"""


class PRNError(Exception):
    pass


class ValidationError(PRNError, ValueError):
    pass


class NumericalError(PRNError, ArithmeticError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DegenerateLandmarks(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class DegenerateBatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class TooFewLandmarks(ValidationError):
    pass


class EmptyRelationList(ValidationError):
    pass


class MissingRelationalFeature(ValidationError):
    pass


class EmptyTripletSet(ValidationError):
    pass


class NoValidTriplet(ValidationError):
    pass


class DegenerateLabelSet(ValidationError):
    pass


class EmptyGallery(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class MissingPrerequisite(ValidationError):
    pass


class NonFiniteValue(NumericalError):
    pass


class DivergedLoss(NumericalError):
    pass
