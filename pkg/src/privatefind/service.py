"""HTTP face of the server role.

The simulation talks to the server in binary frames; a real deployment wants
a long-running multi-client service. This wraps the same PrivateFindServer
behind a small JSON API with hex-encoded byte fields. Report acks stay
deliberately flat: the response body is identical for known, unknown, and
duplicate pseudonyms.
"""

from __future__ import annotations

import time
from typing import Callable, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import wire
from .server import (
    ChallengeMismatch,
    MalformedRequest,
    PrivateFindServer,
    TokenRequired,
    TooManyIds,
    UnknownFinderError,
)


class RegisterInitRequest(BaseModel):
    id_init: str = Field(description="hex, 32 bytes")


class RegisterInitResponse(BaseModel):
    setup_key: str
    wrapped_setup_key: str


class ReportSubmission(BaseModel):
    id_rand: str = Field(description="hex, 32 bytes")
    e2e_message: str = Field(description="hex, 60 bytes")
    token: Optional[str] = None


class AckResponse(BaseModel):
    status: str = "ok"


class SearchRequest(BaseModel):
    ids: list[str]
    token: Optional[str] = None


class FoundEntry(BaseModel):
    id_rand: str
    e2e_message: str
    received_at: int


class SearchResponse(BaseModel):
    results: list[FoundEntry]


class IdListRequest(BaseModel):
    ids: list[str]


class LostIdsResponse(BaseModel):
    ids: list[str]


class TokenChallengeRequest(BaseModel):
    id_init: str


class TokenChallengeResponse(BaseModel):
    wrapped_challenge: str


class TokenAnswerRequest(BaseModel):
    id_init: str
    nonce: str


class TokenGrantResponse(BaseModel):
    token: str


def _hex(value: str, length: int, name: str) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise HTTPException(status_code=400, detail=f"{name} is not valid hex")
    if len(raw) != length:
        raise HTTPException(status_code=400, detail=f"{name} must be {length} bytes")
    return raw


def _opt_token(value: Optional[str]) -> Optional[bytes]:
    if value is None:
        return None
    return _hex(value, wire.TOKEN_LEN, "token")


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


def create_app(server: PrivateFindServer, clock: Callable[[], int] = wall_clock_ms) -> FastAPI:
    app = FastAPI(title="privatefind server", version="0.1.0")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "reports": server.report_count()}

    @app.post("/register-init", response_model=RegisterInitResponse)
    def register_init(req: RegisterInitRequest):
        id_init = _hex(req.id_init, 32, "id_init")
        try:
            setup_key, wrapped = server.register_init(id_init, clock())
        except UnknownFinderError:
            raise HTTPException(status_code=404, detail="unknown finder")
        return RegisterInitResponse(setup_key=setup_key.hex(), wrapped_setup_key=wrapped.hex())

    @app.post("/reports", response_model=AckResponse)
    def submit_report(req: ReportSubmission):
        id_rand = _hex(req.id_rand, 32, "id_rand")
        e2e = _hex(req.e2e_message, wire.E2E_MESSAGE_LEN, "e2e_message")
        try:
            server.ingest(id_rand, e2e, clock(), token=_opt_token(req.token))
        except TokenRequired:
            raise HTTPException(status_code=401, detail="token required")
        except MalformedRequest as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return AckResponse()

    @app.post("/search", response_model=SearchResponse)
    def search(req: SearchRequest):
        ids = [_hex(v, 32, "id") for v in req.ids]
        try:
            entries = server.search(ids, clock(), token=_opt_token(req.token))
        except TokenRequired:
            raise HTTPException(status_code=401, detail="token required")
        except TooManyIds:
            raise HTTPException(status_code=400, detail=f"at most {wire.SEARCH_MAX_IDS} ids")
        except MalformedRequest as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return SearchResponse(
            results=[
                FoundEntry(id_rand=i.hex(), e2e_message=e.hex(), received_at=at)
                for i, e, at in entries
            ]
        )

    @app.post("/lost/mark", response_model=AckResponse)
    def mark_lost(req: IdListRequest):
        server.mark_lost([_hex(v, 32, "id") for v in req.ids], clock())
        return AckResponse()

    @app.post("/lost/clear", response_model=AckResponse)
    def clear_lost(req: IdListRequest):
        server.clear_lost([_hex(v, 32, "id") for v in req.ids], clock())
        return AckResponse()

    @app.get("/lost", response_model=LostIdsResponse)
    def lost_ids():
        return LostIdsResponse(ids=[i.hex() for i in server.get_lost_ids(clock())])

    @app.post("/token/challenge", response_model=TokenChallengeResponse)
    def token_challenge(req: TokenChallengeRequest):
        id_init = _hex(req.id_init, 32, "id_init")
        try:
            wrapped = server.token_challenge(id_init, clock())
        except UnknownFinderError:
            raise HTTPException(status_code=404, detail="unknown finder")
        return TokenChallengeResponse(wrapped_challenge=wrapped.hex())

    @app.post("/token/response", response_model=TokenGrantResponse)
    def token_response(req: TokenAnswerRequest):
        id_init = _hex(req.id_init, 32, "id_init")
        nonce = _hex(req.nonce, 32, "nonce")
        try:
            token = server.token_response(id_init, nonce, clock())
        except ChallengeMismatch:
            raise HTTPException(status_code=403, detail="challenge mismatch")
        return TokenGrantResponse(token=token.hex())

    return app
