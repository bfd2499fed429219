"""Exception hierarchy. Library code raises these; main.py maps them to exit codes."""


class VertexDetError(Exception):
    pass


class ConfigError(VertexDetError):
    pass


class ShapeError(VertexDetError):
    pass


class NumericError(VertexDetError):
    pass


class GraphError(VertexDetError):
    pass


class GeometryError(VertexDetError):
    pass


class MatchingError(VertexDetError):
    pass


class SceneGenerationError(VertexDetError):
    pass


class SceneFormatError(VertexDetError):
    def __init__(self, path, detail):
        self.path = str(path)
        self.detail = detail
        super().__init__(f"{self.path}: {detail}")


class CheckpointError(VertexDetError):
    pass
