# entry point for `uvicorn main:app` (render.yaml)
from vmiv.main import app  # noqa: F401
