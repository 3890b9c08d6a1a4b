from app.crud.path_runs import get_path_document, get_path_run, list_path_runs, save_path_run

__all__ = ["save_path_run", "get_path_run", "get_path_document", "list_path_runs"]
