"""
Custom exceptions.
"""


class CodaError(Exception):
    """
    Base class for every error raised by the lab.
    """


class InvalidLabelError(CodaError):
    def __init__(self, label: int, classes: int):
        super().__init__(f"Label {label} is not valid for {classes} classes")
        self.label = label
        self.classes = classes


class DimensionMismatchError(CodaError):
    def __init__(self, what: str, expected, actual):
        super().__init__(f"Dimension mismatch for {what}: expected {expected}, got {actual}")
        self.what = what
        self.expected = expected
        self.actual = actual


class NonFiniteError(CodaError):
    def __init__(self, what: str, names: list[str]):
        super().__init__(f"Non-finite values in {what}: {', '.join(names)}")
        self.what = what
        self.names = names


class NonFiniteLossError(CodaError):
    def __init__(self, record):
        super().__init__(f"Non-finite loss at iteration {record.iteration}: {record}")
        self.record = record


class GenerationError(CodaError):
    def __init__(self, cls: int, target: int, achieved: int, reason: str = ""):
        super().__init__(
            f"Can't place class {cls}: target {target} pixels, achieved {achieved}. {reason}".strip()
        )
        self.cls = cls
        self.target = target
        self.achieved = achieved


class UndefinedMetricError(CodaError):
    def __init__(self, reason: str):
        super().__init__(f"Metric is undefined: {reason}")
        self.reason = reason


class EmptyInputError(CodaError):
    def __init__(self, what: str):
        super().__init__(f"{what} is empty")
        self.what = what


class EmptyEvaluationError(EmptyInputError):
    def __init__(self):
        super().__init__("Evaluation set")


class ConfigError(CodaError):
    def __init__(self, keys: list[str], messages: list[str]):
        super().__init__("Bad config keys: " + "; ".join(messages))
        self.keys = keys
        self.messages = messages


class FormatError(CodaError):
    def __init__(self, path, reason: str):
        super().__init__(f"Malformed file {path}: {reason}")
        self.path = path
        self.reason = reason
