"""Minimal inference service: one-shot top-3 predictions for uploaded images.

POST /predict takes a raw JPEG or PNG body and returns the three highest
scoring labels; with several loaded models the scores are their summed
softmax outputs. GET /healthz reports liveness and load state.
"""

from __future__ import annotations

import time

from fastapi import FastAPI, Request, Response

from . import dataset as ds
from . import ensemble as ens
from . import model as mdl

DEFAULT_MAX_BODY = 10 * 1024 * 1024


class ModelService:
    """Holds the loaded model(s); immutable once loaded, safe for concurrent
    read-only inference."""

    def __init__(self, artifact_dirs: list[str],
                 max_body_bytes: int = DEFAULT_MAX_BODY):
        self.artifact_dirs = list(artifact_dirs)
        self.max_body_bytes = max_body_bytes
        self.models: list[mdl.TrainedModel] | None = None

    @property
    def loaded(self) -> bool:
        return self.models is not None

    def load(self):
        self.models = [mdl.load_model(d) for d in self.artifact_dirs]

    @property
    def model_id(self) -> str:
        return "+".join(m.backbone.name for m in (self.models or []))

    def predict_top3(self, image_bytes: bytes) -> list[dict]:
        matrices = []
        for m in self.models:
            arr = ds.standardize(image_bytes, m.backbone.input_geometry)
            matrices.append(mdl.predict_probs(m, [arr], image_ids=("upload",)))
        scores = ens.sum_softmax(matrices)
        pred = ens.top_k(scores, min(3, len(scores.catalog)))[0]
        return [
            {"label": label, "score": score}
            for label, score in zip(pred.ranked_labels, pred.scores)
        ]


def create_app(service: ModelService) -> FastAPI:
    app = FastAPI(title="bombus inference service")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "model_loaded": service.loaded}

    @app.post("/predict")
    async def predict(request: Request, response: Response):
        if not service.loaded:
            response.status_code = 503
            return {"error": "model not loaded"}
        body = await request.body()
        if len(body) > service.max_body_bytes:
            response.status_code = 413
            return {"error": "request body too large"}
        if not body:
            response.status_code = 400
            return {"error": "empty request body"}
        start = time.perf_counter()
        try:
            predictions = service.predict_top3(body)
        except ds.ImageError as exc:
            response.status_code = 400
            return {"error": f"undecodable image: {exc}"}
        return {
            "predictions": predictions,
            "model_id": service.model_id,
            "latency_ms": (time.perf_counter() - start) * 1000.0,
        }

    return app
