from app.models.base import Base
from app.models.path_run import PathIterate, PathRun

__all__ = ["Base", "PathRun", "PathIterate"]
