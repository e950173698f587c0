"""Exception hierarchy shared by every module."""


class MetricForgeError(Exception):
    """Base class for all errors raised by metricforge."""


# geometry
class EmptyCloud(MetricForgeError):
    pass


class InvalidIntrinsics(MetricForgeError):
    pass


class DimensionMismatch(MetricForgeError):
    pass


class UnknownSceneKind(MetricForgeError):
    pass


# alignment / prompting
class DegenerateFit(MetricForgeError):
    pass


class NoUsablePrompts(MetricForgeError):
    pass


class NonPositiveSourceAtPrompt(MetricForgeError):
    pass


class NoValidPixels(MetricForgeError):
    pass


# losses / metrics
class NonPositiveDepth(MetricForgeError):
    pass


class EmptyOverlap(MetricForgeError):
    pass


class EmptyMask(MetricForgeError):
    pass


class UnknownLoss(MetricForgeError):
    pass


class NonPositiveFocal(MetricForgeError):
    pass


# calibration
class InsufficientPoints(MetricForgeError):
    pass


class DegenerateRays(MetricForgeError):
    pass


# cli
class ManifestParse(MetricForgeError):
    pass


class MissingInput(MetricForgeError):
    pass


class WriteFailure(MetricForgeError):
    pass
