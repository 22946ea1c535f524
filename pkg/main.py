"""
MAMBA inspection API.

Small FastAPI service around trained checkpoints:
1. Message codec - encode / decode 28-byte frames
2. Evaluation - greedy central or decentralized evaluation of a checkpoint
3. Episode stream - server-sent events of the decoded bus traffic of one
   decentralized episode

Training is not exposed here; use cli.py.
"""
import asyncio
import json
import os
from typing import AsyncGenerator, List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import StreamingResponse
from pydantic import BaseModel, Field

from communication import MessageCodec
from core import (
    CHECKPOINT_DIR, CheckpointError, CodecError, ConfigError, EnvName, EvalMode, InvalidInputError, MambaError,
    NotReadyError, RngStream, load_config,
)
from envs import make_env
from exec_runtime import AgentBundle, MessageBus, build_bundle, load_bundle, make_runtimes, run_decentralized
from trainer import RunMetrics, evaluate

API_VERSION = "1.0.0"
CORS_ORIGINS = [o.strip() for o in os.getenv("MAMBA_CORS_ORIGINS", "*").split(",") if o.strip()]

app = FastAPI(
    title="MAMBA inspection API",
    description="Message codec, checkpoint evaluation and bus traffic of decentralized episodes",
    version=API_VERSION,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# =============================================================================
# MODELS
# =============================================================================

class EncodeRequest(BaseModel):
    agent_id: int = Field(..., ge=0)
    step: int = Field(..., ge=0)
    z_indices: List[int]
    action: int = Field(..., ge=0)
    alive: bool = True
    n_groups: int = 32
    n_classes: int = 32


class FrameResponse(BaseModel):
    frame_hex: str
    frame_bytes: int
    payload_bits: int


class DecodeRequest(BaseModel):
    frame_hex: str
    n_groups: int = 32
    n_classes: int = 32


class DecodedMessage(BaseModel):
    agent_id: int
    step: int
    z_indices: List[int]
    action: int
    alive: bool


class EvaluateRequest(BaseModel):
    checkpoint: str
    episodes: int = Field(10, ge=0, le=1000)
    mode: EvalMode = EvalMode.CENTRAL
    seed: int = Field(0, ge=0)


class EpisodeRequest(BaseModel):
    """Checkpoint to replay, or a random-init model built from the given settings"""

    checkpoint: Optional[str] = None
    env: EnvName = EnvName.MINIRAIL
    n_agents: int = Field(2, ge=1, le=16)
    hidden_size: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)
    max_steps: Optional[int] = Field(None, ge=1)


# =============================================================================
# HELPERS
# =============================================================================

def _checkpoint_path(path: str) -> str:
    """Resolve a client path inside CHECKPOINT_DIR; anything that escapes it is a 400"""
    root = os.path.realpath(CHECKPOINT_DIR)
    full = os.path.realpath(os.path.join(root, path))
    if os.path.commonpath([root, full]) != root:
        raise HTTPException(status_code=400, detail=f"checkpoint must be inside {CHECKPOINT_DIR}: {path}")
    return full


def _load(path: str) -> AgentBundle:
    full = _checkpoint_path(path)
    if not os.path.isfile(full):
        raise HTTPException(status_code=404, detail=f"checkpoint not found: {path}")
    return load_bundle(full)[0]


def _http_error(error: MambaError) -> HTTPException:
    if isinstance(error, NotReadyError):
        return HTTPException(status_code=409, detail=str(error))
    if isinstance(error, (InvalidInputError, ConfigError, CodecError, CheckpointError)):
        return HTTPException(status_code=400, detail=str(error))
    return HTTPException(status_code=500, detail=str(error))


class RecordingBus(MessageBus):
    """Bus that also keeps every published frame in order"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.frames: List[bytes] = []

    def publish(self, frame: bytes, account: bool = True) -> None:
        super().publish(frame, account)
        self.frames.append(frame)


def _episode_bundle(request: EpisodeRequest) -> AgentBundle:
    if request.checkpoint:
        return _load(request.checkpoint)
    config = load_config(env=request.env.value, n_agents=request.n_agents, hidden_size=request.hidden_size,
                         seed=request.seed)
    return build_bundle(config)


async def episode_events(request: EpisodeRequest) -> AsyncGenerator[str, None]:
    """SSE lines: one `message` event per frame, then `complete` or `error`"""
    try:
        yield ": keepalive\n\n"
        bundle = await asyncio.to_thread(_episode_bundle, request)
        config = bundle.config
        if config.use_linear_comm:
            raise ConfigError("bus streaming covers raw message frames; linear exchange carries summaries")
        codec = MessageCodec.from_config(config)
        env = make_env(config)
        bus = RecordingBus(env.n_agents, codec)
        runtimes = make_runtimes(bundle, RngStream(request.seed, "execution"), greedy=True)
        result = await asyncio.to_thread(run_decentralized, env, runtimes, bus, request.seed, request.max_steps,
                                         config)
        for frame in bus.frames:
            message = codec.decode(frame)
            event = {
                "type": "message",
                "agent_id": message.agent_id,
                "step": message.step,
                "action": message.action,
                "alive": message.alive,
                "z_indices": list(message.z_indices),
                "frame_hex": frame.hex(),
            }
            yield f"data: {json.dumps(event)}\n\n"
            await asyncio.sleep(0)
        final = {
            "type": "complete",
            "steps": result.steps,
            "episode_return": result.episode_return,
            "success": result.success,
            "payload_bits": result.ledger.alive_payload_bits,
            "framed_bytes": result.ledger.framed_bytes,
        }
        yield f"data: {json.dumps(final)}\n\n"
    except HTTPException as e:
        yield f"data: {json.dumps({'type': 'error', 'status': e.status_code, 'message': e.detail})}\n\n"
    except MambaError as e:
        print(f"❌ Stream error: {e}")
        yield f"data: {json.dumps({'type': 'error', 'status': _http_error(e).status_code, 'message': str(e)})}\n\n"


# =============================================================================
# API ENDPOINTS
# =============================================================================

@app.get("/")
async def root():
    """Health check and API info"""
    return {
        "name": "MAMBA inspection API",
        "version": API_VERSION,
        "status": "operational",
        "checkpoint_dir": CHECKPOINT_DIR,
        "environments": [e.value for e in EnvName],
        "message": {"frame_bytes": MessageCodec().frame_size, "payload_bits": MessageCodec().payload_bits},
        "endpoints": {
            "encode": "/messages/encode (POST) - latent indices to a framed message",
            "decode": "/messages/decode (POST) - framed message to fields",
            "evaluate": "/evaluate (POST) - greedy evaluation of a checkpoint",
            "episode_stream": "/episode/stream (POST) - SSE bus traffic of one decentralized episode",
        },
    }


@app.post("/messages/encode", response_model=FrameResponse)
async def encode_frame(request: EncodeRequest):
    try:
        codec = MessageCodec(request.n_groups, request.n_classes)
        frame = codec.encode(request.agent_id, request.step, request.z_indices, request.action, request.alive)
    except MambaError as e:
        raise _http_error(e)
    return FrameResponse(frame_hex=frame.hex(), frame_bytes=len(frame), payload_bits=codec.payload_bits)


@app.post("/messages/decode", response_model=DecodedMessage)
async def decode_frame(request: DecodeRequest):
    try:
        data = bytes.fromhex(request.frame_hex)
    except ValueError:
        raise HTTPException(status_code=400, detail="frame_hex is not valid hexadecimal")
    try:
        message = MessageCodec(request.n_groups, request.n_classes).decode(data)
    except MambaError as e:
        raise _http_error(e)
    return DecodedMessage(agent_id=message.agent_id, step=message.step, z_indices=list(message.z_indices),
                          action=message.action, alive=message.alive)


@app.post("/evaluate", response_model=RunMetrics)
async def evaluate_checkpoint(request: EvaluateRequest):
    """Greedy evaluation; loading and episodes run in worker threads"""
    try:
        bundle = await asyncio.to_thread(_load, request.checkpoint)
        return await asyncio.to_thread(evaluate, bundle, None, request.episodes, request.mode, request.seed)
    except MambaError as e:
        raise _http_error(e)


@app.post("/episode/stream")
async def episode_stream(request: EpisodeRequest):
    return StreamingResponse(
        episode_events(request),
        media_type="text/event-stream",
        headers={
            "Cache-Control": "no-cache",
            "Connection": "keep-alive",
            "X-Accel-Buffering": "no",
        },
    )


if __name__ == "__main__":
    import uvicorn
    port = int(os.getenv("PORT", "8000"))
    print(f"✅ MAMBA inspection API on port {port}")
    uvicorn.run(app, host="0.0.0.0", port=port)
