import uvicorn
from fastapi import FastAPI

from luminet.routes import relight, runs

# Create FastAPI app
app = FastAPI(title="LumiNet")

# Include routers
app.include_router(relight.router, prefix="/relight", tags=["relight"])
app.include_router(runs.router, prefix="/runs", tags=["runs"])


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy"}


def serve(host: str = "127.0.0.1", port: int = 8081, reload: bool = False) -> None:
    uvicorn.run("luminet.main:app", host=host, port=port, reload=reload)


if __name__ == "__main__":
    serve(reload=True)
