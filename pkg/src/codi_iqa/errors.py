class CodiIQAError(Exception):
    """Base class for errors raised by this package."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "type": type(self).__name__, "message": str(self)}


class ConfigurationError(CodiIQAError, ValueError):
    kind = "configuration"


class InputError(CodiIQAError, ValueError):
    kind = "input"


class ProvenanceError(CodiIQAError):
    kind = "provenance"


class CheckpointError(CodiIQAError):
    kind = "checkpoint"


class ManifestError(CodiIQAError, ValueError):
    kind = "manifest"


class UndefinedMetricError(CodiIQAError, ValueError):
    kind = "undefined-metric"


class DegenerateWeightsError(CodiIQAError, ValueError):
    kind = "degenerate-weights"


class PreprocessingMismatchError(CodiIQAError):
    kind = "preprocessing-mismatch"


class TrainingError(CodiIQAError, RuntimeError):
    kind = "training"
