from app.schemas.path import (
    DispatchIn,
    PathDocument,
    PathRequest,
    PathRunOut,
    PathRunSummaryOut,
    PfOut,
    PfRequest,
    RegionSliceDocument,
    read_path,
    write_document,
    write_path,
)

__all__ = [
    "DispatchIn",
    "PathDocument",
    "PathRequest",
    "PathRunOut",
    "PathRunSummaryOut",
    "PfOut",
    "PfRequest",
    "RegionSliceDocument",
    "read_path",
    "write_document",
    "write_path",
]
