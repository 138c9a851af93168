"""FastAPI service layer wrapping the engine."""
