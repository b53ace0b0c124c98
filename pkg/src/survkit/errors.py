"""Exception hierarchy shared across the toolkit."""


class SurvkitError(Exception):
    """Base class for all domain errors raised by this package."""


class LabelParseError(SurvkitError):
    """A label file line violates the `class cx cy w h` schema."""


class ManifestError(SurvkitError):
    """Dataset layout or manifest document is inconsistent."""


class CutoutError(SurvkitError):
    """A sprite could not be extracted or is degenerate."""


class PlacementFailed(SurvkitError):
    """No valid placement found within the attempt budget."""


class BlendError(SurvkitError):
    """Compositing produced an unusable result (e.g. fully transparent sprite)."""


class PlanError(SurvkitError):
    """An augmentation plan cannot be built or executed as requested."""


class BackendError(SurvkitError):
    """A detector backend failed (process, timeout, or protocol)."""


class ProtocolError(BackendError):
    """Wire-protocol violation: bad handshake, malformed frame, id mismatch."""


class EvalError(SurvkitError):
    """Detections and ground truth cannot be evaluated together."""
