"""HTTP scoring service over a prepared workspace.

Wraps trained checkpoints and the rule-based baseline behind a small
FastAPI app so multiple clients can score and rank loops without loading
models themselves. Pipeline stages (ingest/extract/train) stay in the
CLI; the service is inference-only.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import store
from .errors import InvalidInput, LoopkitError
from .evaluate import N_CANDIDATES
from .nn.checkpoint import load_checkpoint
from .scoring import SCORER_KINDS, LoopScorer


class ScoreRequest(BaseModel):
    scorer: str = Field(description="cnn, snn, or amu")
    loop_a: str
    loop_b: str


class ScoreResponse(BaseModel):
    scorer: str
    loop_a: str
    loop_b: str
    score: float


class RankRequest(BaseModel):
    scorer: str
    query: str
    candidates: list[str] = Field(default_factory=list,
                                  description="empty: all other loops")
    top_n: int = N_CANDIDATES


class RankedLoop(BaseModel):
    loop_id: str
    score: float


class RankResponse(BaseModel):
    scorer: str
    query: str
    ranking: list[RankedLoop]


class LoopInfo(BaseModel):
    loop_id: str
    song_id: str
    split: str | None
    strategy: str | None


def create_app(workspace) -> FastAPI:
    workspace = Path(workspace)
    paths = store.workspace_paths(workspace)
    manifest = store.Manifest.load(paths["manifest"])
    app = FastAPI(title="loopkit scoring service")
    scorers: dict[str, LoopScorer] = {}

    def scorer_for(kind: str) -> LoopScorer:
        if kind not in SCORER_KINDS:
            raise HTTPException(422, f"unknown scorer {kind!r}")
        if kind not in scorers:
            try:
                if kind == "amu":
                    scorers[kind] = LoopScorer("amu", manifest, workspace)
                else:
                    ckpt_path = paths[store.CHECKPOINT_DIR] / f"{kind}.ckpt"
                    if not ckpt_path.exists():
                        raise HTTPException(
                            404, f"no {kind} checkpoint at {ckpt_path}")
                    ckpt = load_checkpoint(ckpt_path)
                    scorers[kind] = LoopScorer(kind, manifest, workspace, ckpt)
            except InvalidInput as exc:
                raise HTTPException(422, str(exc)) from exc
        return scorers[kind]

    @app.get("/health")
    def health():
        return {"status": "ok", "loops": len(manifest.loops),
                "pairs": len(manifest.pairs)}

    @app.get("/loops", response_model=list[LoopInfo])
    def loops():
        return [LoopInfo(loop_id=l.loop_id, song_id=l.song_id,
                         split=manifest.loop_split(l.loop_id),
                         strategy=l.strategy)
                for l in sorted(manifest.loops.values(), key=lambda l: l.loop_id)]

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        scorer = scorer_for(req.scorer)
        for loop_id in (req.loop_a, req.loop_b):
            if loop_id not in manifest.loops:
                raise HTTPException(404, f"unknown loop {loop_id!r}")
        try:
            value = scorer(req.loop_a, req.loop_b)
        except LoopkitError as exc:
            raise HTTPException(422, str(exc)) from exc
        return ScoreResponse(scorer=req.scorer, loop_a=req.loop_a,
                             loop_b=req.loop_b, score=value)

    @app.post("/rank", response_model=RankResponse)
    def rank(req: RankRequest):
        scorer = scorer_for(req.scorer)
        if req.query not in manifest.loops:
            raise HTTPException(404, f"unknown loop {req.query!r}")
        candidates = req.candidates or [l for l in sorted(manifest.loops)
                                        if l != req.query]
        for loop_id in candidates:
            if loop_id not in manifest.loops:
                raise HTTPException(404, f"unknown loop {loop_id!r}")
        try:
            scored = [(loop_id, scorer(req.query, loop_id))
                      for loop_id in candidates]
        except LoopkitError as exc:
            raise HTTPException(422, str(exc)) from exc
        scored.sort(key=lambda item: -item[1])
        return RankResponse(scorer=req.scorer, query=req.query,
                            ranking=[RankedLoop(loop_id=l, score=s)
                                     for l, s in scored[: req.top_n]])

    return app
