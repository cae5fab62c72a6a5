"""Exception types shared across the package.

The hierarchy mirrors the CLI exit-code contract: configuration problems
exit 2, data/file problems exit 3, numerical failures exit 4.
"""


class CorrposeError(Exception):
    """Base class for all package errors."""


class ConfigError(CorrposeError):
    """Invalid configuration file or flag combination."""


class DataError(CorrposeError):
    """Problems locating, decoding, or associating dataset files."""


class NumericalError(CorrposeError):
    """Numerical failure (non-finite loss, degenerate network output)."""


# -- geometry ---------------------------------------------------------------

class DegenerateRotationInput(NumericalError):
    """6D rotation parameters too close to degenerate for Gram-Schmidt.

    Signals an untrained or diverged network output; never expected on
    healthy checkpoints.
    """


class InvalidDepth(NumericalError):
    """Back-projection requested for a non-positive depth."""


class BehindCamera(NumericalError):
    """Projection requested for a point at or behind the image plane."""


# -- tensor plumbing --------------------------------------------------------

class ShapeMismatch(CorrposeError):
    """Operands disagree on a required shape."""


# -- retrieval / selection --------------------------------------------------

class EmptyMap(DataError):
    """Retrieval index built or queried with no map entries."""


class EmptyQuery(DataError):
    """Evaluation requested with no query frames."""


class DimensionMismatch(DataError):
    """Descriptor dimensions disagree."""


class EmptyCandidates(CorrposeError):
    """Candidate selection invoked with an empty list."""


class IndexFormatError(DataError):
    """Retrieval index file is malformed or has the wrong magic."""


# -- datasets ---------------------------------------------------------------

class LayoutError(DataError):
    """Dataset root does not match the expected on-disk layout."""


class MissingPose(DataError):
    """A frame lacks a ground-truth pose file or record."""


class AssociationFailure(DataError):
    """Timestamp association failed for a whole sequence."""


class DecodeError(DataError):
    """An image file could not be decoded."""


# -- training ---------------------------------------------------------------

class NoPairs(DataError):
    """Training requested on an empty pair list."""


class NonFiniteLoss(NumericalError):
    """Training loss became NaN/Inf; carries the offending batch ids."""

    def __init__(self, message: str, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids is not None else []
