from pathlib import Path

from fastapi import APIRouter, Depends, Query, Request
from fastapi.responses import HTMLResponse
from fastapi.templating import Jinja2Templates
from sqlalchemy.orm import Session

from luminet.database import get_db
from luminet.services.runs import RunRegistry

_TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"

router = APIRouter()
templates = Jinja2Templates(directory=str(_TEMPLATES_DIR))


@router.get("/", response_class=HTMLResponse)
async def list_runs_page(request: Request, db: Session = Depends(get_db)):
    """Render the run registry page"""
    runs = RunRegistry(db).list_runs()
    return templates.TemplateResponse(request, "runs.html", {"runs": runs})


@router.get("/api/list")
async def api_list_runs(limit: int = Query(100, ge=1, le=1000), db: Session = Depends(get_db)):
    """API endpoint to list recorded runs, newest first"""
    return [run.model_dump(mode="json") for run in RunRegistry(db).list_runs(limit)]
