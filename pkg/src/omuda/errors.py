"""Exception types raised across the package."""


class OmudaError(Exception):
    """Base class for all package errors."""


class ArgumentError(OmudaError, ValueError):
    pass


class DegenerateVectorError(OmudaError, ValueError):
    pass


class EvaluationError(OmudaError, ArithmeticError):
    pass


class ConfigError(OmudaError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class EmptyDataError(OmudaError, ValueError):
    pass


class DataError(OmudaError, ValueError):
    pass


class SamplingIndexError(OmudaError, LookupError):
    def __init__(self, cls):
        super().__init__(f"no candidate image for class {cls}")
        self.cls = cls


class FormatError(OmudaError):
    def __init__(self, message, offset=None, image_index=None):
        where = []
        if image_index is not None:
            where.append(f"image {image_index}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.image_index = image_index


class TrainingDivergence(OmudaError, ArithmeticError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term
