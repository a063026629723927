"""Exception hierarchy shared by all modules.

Every domain error derives from :class:`LaughSVError` so the CLI can map
them to exit code 1 and report the class name.
"""


class LaughSVError(Exception):
    """Base class for domain errors."""


class FrameTooShort(LaughSVError, ValueError):
    pass


class SegmentTooShort(LaughSVError, ValueError):
    pass


class DegenerateEmbedding(LaughSVError, ValueError):
    pass


class BatchShapeError(LaughSVError, ValueError):
    pass


class LabelError(LaughSVError, ValueError):
    pass


class NonFiniteLoss(LaughSVError, ValueError):
    pass


class CheckpointIncompatible(LaughSVError):
    pass


class InsufficientSpeakers(LaughSVError, ValueError):
    pass


class NoTrainingData(LaughSVError, ValueError):
    pass


class MissingMetadata(LaughSVError, ValueError):
    pass


class MissingEmbedding(LaughSVError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DegenerateTrials(LaughSVError, ValueError):
    pass


class InsufficientPoints(LaughSVError, ValueError):
    pass


class ManifestError(LaughSVError, ValueError):
    pass
