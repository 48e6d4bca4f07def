import io
import os
from functools import lru_cache
from pathlib import Path

import aiofiles
from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import Response
from PIL import Image
from pydantic import ValidationError

from luminet.config import luminet_home
from luminet.errors import CheckpointError, DataError, ModelNotLoadedError, ShapeError
from luminet.models.relight import RelightRequest
from luminet.services.diffusion import LuminetModels, relight
from luminet.services.imaging import image_hash, load_image, quantize

router = APIRouter()


def checkpoint_path() -> Path:
    return Path(os.getenv("LUMINET_CHECKPOINT", str(luminet_home() / "checkpoints" / "luminet.ckpt")))


@lru_cache(maxsize=2)
def _load_models(path: str) -> LuminetModels:
    return LuminetModels.load(path)


def get_models() -> LuminetModels:
    """Models for the service; tests override this dependency"""
    path = checkpoint_path()
    if not path.exists():
        raise HTTPException(status_code=503, detail=f"no checkpoint at {path}")
    try:
        return _load_models(str(path))
    except (CheckpointError, ModelNotLoadedError) as e:
        raise HTTPException(status_code=503, detail=str(e))


def _encode_png(image) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(quantize(image)).save(buffer, format="PNG")
    return buffer.getvalue()


@router.post("")
async def relight_upload(
    source: UploadFile = File(...),
    target: UploadFile = File(...),
    seed: int = Form(0),
    steps: int | None = Form(None),
    models: LuminetModels = Depends(get_models),
):
    """Relight the uploaded source image under the uploaded target's lighting"""
    size = models.config.intrinsics.image_size
    try:
        source_image = load_image(io.BytesIO(await source.read()), size)
        target_image = load_image(io.BytesIO(await target.read()), size)
        request = RelightRequest(
            source=source_image,
            target=target_image,
            seed=seed,
            steps=steps or models.config.diffusion.sample_steps,
        )
        image = await run_in_threadpool(relight, models, request)
    except ModelNotLoadedError as e:
        raise HTTPException(status_code=503, detail=str(e))
    except (ShapeError, DataError, ValidationError) as e:
        raise HTTPException(status_code=400, detail=str(e))

    content = _encode_png(image)
    out_dir = luminet_home() / "outputs"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"relit_{image_hash(image)[:16]}_seed{seed}.png"
    async with aiofiles.open(out_path, "wb") as f:
        await f.write(content)

    return Response(content=content, media_type="image/png", headers={"X-Output-Path": str(out_path)})
