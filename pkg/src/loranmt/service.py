"""HTTP inference service with live, atomically swappable adapter mixtures.

Endpoints: GET /health, GET /adapters, PUT /mixture, POST /translate; errors
are RFC-7807-style problem documents. Mixture updates recompose eagerly, and
bursts coalesce to the newest pending mixture (intermediate recompositions
are skipped). Translations read one immutable (mixture, weights) snapshot,
so no request ever sees a torn state.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .adapter import LoRAAdapter, load_adapter, param_count
from .data import Vocab, decode, encode
from .errors import ConfigError
from .model import Model
from .mole import AdapterMixture, MixtureComponent, compose


class Problem(Exception):
    """RFC-7807 problem document carrier."""

    def __init__(self, status: int, title: str, detail: str):
        super().__init__(detail)
        self.status = status
        self.title = title
        self.detail = detail

    def response(self) -> JSONResponse:
        return JSONResponse(
            {"type": "about:blank", "title": self.title,
             "status": self.status, "detail": self.detail},
            status_code=self.status, media_type="application/problem+json")


@dataclass(frozen=True)
class Snapshot:
    """One composed state: the mixture, its weights, and the cache key.

    weights is None for the empty (base-model) mixture. Swapped as a single
    reference, so (mixture, weights) can never be observed torn.
    """

    mixture: AdapterMixture
    weights: dict | None
    content_hash: str


class ServiceState:
    """Base model, adapter registry, and the active composed snapshot.

    Many concurrent readers, single writer: translate reads the snapshot
    reference without locking; apply_mixture serializes composition and
    publishes a complete snapshot. A burst of updates coalesces to the
    newest pending mixture. stale_deadline bounds how long a translate may
    be served while a newer mixture is still composing; past it the request
    is refused rather than answered with stale weights.
    """

    def __init__(self, model: Model, vocab: Vocab,
                 adapters: dict[str, LoRAAdapter],
                 stale_deadline: float = 2.0):
        self.model = model
        self.vocab = vocab
        self.adapters = dict(sorted(adapters.items()))
        self.base_hash = model.content_hash()
        self.stale_deadline = stale_deadline

        empty = AdapterMixture([], base_hash=self.base_hash)
        self._snapshot = Snapshot(empty, None, empty.content_hash())
        self._cond = threading.Condition()
        self._compose_lock = threading.Lock()
        # queued work: (ticket, mixture, since); since is the stamp time of
        # the oldest request coalesced into this entry
        self._pending: tuple[int, AdapterMixture, float] | None = None
        self._inflight_since: float | None = None
        self._next_ticket = 0
        self._covered = 0
        self.translate_count = 0
        self.mixture_updates = 0
        self.recompose_count = 0
        self.coalesced_count = 0

    # -- registry -------------------------------------------------------------

    def registry(self) -> list[dict]:
        return [{"id": aid, "task_name": a.task_name, "rank": a.rank,
                 "param_count": param_count(a),
                 "default_lambda": a.default_lambda}
                for aid, a in self.adapters.items()]

    def build_mixture(self, components: list[dict]) -> AdapterMixture:
        unknown = sorted({c["id"] for c in components} - set(self.adapters))
        if unknown:
            raise Problem(404, "unknown adapter",
                          f"no adapter with id {', '.join(unknown)}")
        for c in components:
            if not (math.isfinite(c["alpha"]) and math.isfinite(c["lambda"])):
                raise Problem(422, "non-finite coefficient",
                              f"component {c['id']!r} has a non-finite "
                              f"alpha or lambda")
        try:
            comps = [MixtureComponent(c["id"], float(c["alpha"]),
                                      float(c["lambda"]))
                     for c in components]
        except ConfigError as err:
            raise Problem(422, "invalid mixture", str(err)) from err
        return AdapterMixture(comps, base_hash=self.base_hash)

    def compose_weights(self, mix: AdapterMixture) -> dict | None:
        active = self._snapshot
        if mix.content_hash() == active.content_hash:
            return active.weights
        return compose(self.model, mix, self.adapters) or None

    # -- mixture swap -----------------------------------------------------------

    def apply_mixture(self, mix: AdapterMixture) -> str:
        """Publish mix (or be superseded by a newer one), return its hash.

        Each caller stamps a ticket; whoever gets the compose lock composes
        the newest pending mixture, which covers every earlier ticket. On
        return the active snapshot is this mixture or a newer one.
        """
        with self._cond:
            self._next_ticket += 1
            ticket = self._next_ticket
            if self._pending is not None:
                # superseded entry keeps the older stamp: the served state
                # has been outdated since the first unapplied request
                since = self._pending[2]
                self.coalesced_count += 1
            else:
                since = time.monotonic()
            self._pending = (ticket, mix, since)
            self.mixture_updates += 1
        while True:
            if self._compose_lock.acquire(blocking=False):
                try:
                    with self._cond:
                        work = self._pending
                        self._pending = None
                        if work is not None:
                            self._inflight_since = work[2]
                    if work is not None:
                        t, m, _ = work
                        weights = compose(self.model, m, self.adapters) or None
                        snap = Snapshot(m, weights, m.content_hash())
                        with self._cond:
                            self._snapshot = snap
                            self._covered = max(self._covered, t)
                            self._inflight_since = None
                            self.recompose_count += 1
                            self._cond.notify_all()
                finally:
                    self._compose_lock.release()
            with self._cond:
                if self._covered >= ticket:
                    return mix.content_hash()
                self._cond.wait(timeout=0.05)

    # -- translate --------------------------------------------------------------

    def translate(self, text: str,
                  override: AdapterMixture | None = None) -> dict:
        start = time.perf_counter()
        ids = encode(self.vocab, text, framed=False)
        if not ids:
            raise Problem(422, "empty text",
                          "text is empty after normalization")
        with self._cond:
            stale_since = self._inflight_since
            if self._pending is not None and stale_since is None:
                stale_since = self._pending[2]
        if stale_since is not None and \
                time.monotonic() - stale_since > self.stale_deadline:
            raise Problem(503, "recomposition overdue",
                          "a newer mixture has been composing for longer "
                          "than the staleness deadline")
        if override is not None:
            weights = self.compose_weights(override)
            mixture_hash = override.content_hash()
        else:
            snap = self._snapshot
            weights, mixture_hash = snap.weights, snap.content_hash
        out = self.model.greedy_decode(
            ids[:self.model.cfg.max_len], max_len=self.model.cfg.max_len - 1,
            overrides=weights)
        with self._cond:
            self.translate_count += 1
        return {"translation": decode(self.vocab, out),
                "mixture_hash": mixture_hash,
                "latency_ms": (time.perf_counter() - start) * 1e3}


def build_state_from_paths(base, vocab, adapters_dir,
                           stale_deadline: float = 2.0) -> ServiceState:
    """Load a checkpoint, vocab, and every .lora file in a directory.

    Adapter ids are the file stems, sorted, so the registry is stable.
    """
    model = Model.load(base)
    v = Vocab.load(vocab)
    adapters = {p.stem: load_adapter(p)
                for p in sorted(Path(adapters_dir).glob("*.lora"))}
    return ServiceState(model, v, adapters, stale_deadline=stale_deadline)


class ComponentIn(BaseModel):
    id: str
    alpha: float = 1.0
    lam: float = Field(1.0, alias="lambda")

    def as_dict(self) -> dict:
        return {"id": self.id, "alpha": self.alpha, "lambda": self.lam}


class MixtureIn(BaseModel):
    components: list[ComponentIn] = Field(default_factory=list)


class TranslateIn(BaseModel):
    text: str
    mixture_override: MixtureIn | None = None


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="loranmt", docs_url=None, redoc_url=None)

    @app.exception_handler(Problem)
    def _problem(request: Request, exc: Problem):
        return exc.response()

    @app.exception_handler(RequestValidationError)
    def _validation(request: Request, exc: RequestValidationError):
        return Problem(422, "invalid request body", str(exc)).response()

    @app.get("/health")
    def health():
        return {"status": "ok", "base_hash": state.base_hash}

    @app.get("/adapters")
    def adapters():
        return state.registry()

    @app.put("/mixture")
    def put_mixture(body: MixtureIn):
        components = [c.as_dict() for c in body.components]
        mix = state.build_mixture(components)
        mixture_hash = state.apply_mixture(mix)
        return {"components": components, "mixture_hash": mixture_hash}

    @app.post("/translate")
    def translate(body: TranslateIn):
        override = None
        if body.mixture_override is not None:
            override = state.build_mixture(
                [c.as_dict() for c in body.mixture_override.components])
        return state.translate(body.text, override)

    return app
