"""The attacker pipeline: acquire, classify, submit, verify.

One session walks the three-step flow against the JSON API: fetch a
challenge (images arrive inline as base64 PGM), classify every tile with
a pluggable backend behind a perceptual-hash dedup cache, select the
tiles whose label matches the prompted target, submit, and on a pass
exercise the server-side verify endpoint. Per-stage wall time is recorded
from the session clock; in simulated-clock mode configured latencies are
logical advances, making whole campaigns bit-reproducible.

The solver sees only wire payloads; tile ground truth never reaches it.
"""
from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .api import Transport
from .backends import Backend
from .clockwork import Clock
from .errors import GauntletError
from .hashkit import PHash64, hamming, phash64
from .pgm import parse_pgm_b64, write_pgm


class DedupCache:
    """Perceptual-hash -> label memo shared across solver sessions.

    Entries are written only after a backend classification; lookups at
    threshold 0 are exact-key hits, larger thresholds scan for the nearest
    stored hash. Concurrent writers race benignly (last writer wins)."""

    def __init__(self, threshold: int = 0):
        if not 0 <= threshold <= 64:
            raise GauntletError("cache threshold must be in [0, 64]")
        self.threshold = threshold
        self.entries: dict[PHash64, str] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def lookup(self, ph: PHash64) -> str | None:
        with self._lock:
            label = self.entries.get(ph)
            if label is None and self.threshold > 0:
                best_d = self.threshold + 1
                for stored, stored_label in self.entries.items():
                    d = hamming(ph, stored)
                    if d < best_d:
                        best_d, label = d, stored_label
            if label is None:
                self.misses += 1
            else:
                self.hits += 1
            return label

    def store(self, ph: PHash64, label: str) -> None:
        with self._lock:
            self.entries[ph] = label

    @property
    def lookups(self) -> int:
        return self.hits + self.misses


@dataclass(frozen=True)
class StageLatencies:
    """Injected latencies in ms; in live mode these are real sleeps."""

    acquire_ms: int = 0
    download_ms: int = 0
    solve_ms: int = 0
    submit_ms: int = 0


@dataclass
class TileDecision:
    tile_id: str
    label: str
    selected: bool
    cache_hit: bool

    def to_json_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "label": self.label,
            "selected": self.selected,
            "cache_hit": self.cache_hit,
        }


@dataclass
class SessionRecord:
    """Outcome and instrumentation for one attack session."""

    challenge_id: str | None
    outcome: str  # pass | fail | blocked | error
    target: str | None
    rounds: int
    acquire_ms: int
    solve_ms: int
    submit_verify_ms: int
    total_ms: int
    selections_per_round: list[int]
    decisions: list[list[TileDecision]]
    backend_calls: int
    cache_hits: int
    token_verified: bool | None
    message: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "challenge_id": self.challenge_id,
            "outcome": self.outcome,
            "target": self.target,
            "rounds": self.rounds,
            "timings_ms": {
                "acquire": self.acquire_ms,
                "solve": self.solve_ms,
                "submit_verify": self.submit_verify_ms,
                "total": self.total_ms,
            },
            "selections_per_round": self.selections_per_round,
            "decisions": [[d.to_json_dict() for d in rnd] for rnd in self.decisions],
            "backend_calls": self.backend_calls,
            "cache_hits": self.cache_hits,
            "token_verified": self.token_verified,
            "message": self.message,
        }


class AcquireBlocked(GauntletError):
    pass


class AcquireExpired(GauntletError):
    pass


@dataclass
class _Acquired:
    session_id: str
    challenge_id: str
    target: str
    rounds: int
    tiles: list[tuple[str, np.ndarray]]


def _parse_target(prompt_text: str) -> str:
    # Prompts read "Please click each image containing a <category>".
    return prompt_text.rsplit(" ", 1)[-1]


class Solver:
    """Sequential attacker for one or many sessions over a transport."""

    def __init__(
        self,
        transport: Transport,
        backend: Backend,
        cache: DedupCache,
        rng: random.Random,
        clock: Clock,
        latencies: StageLatencies = StageLatencies(),
        verify_secret: str | None = None,
        artifact_dir: str | Path | None = None,
    ):
        self.transport = transport
        self.backend = backend
        self.cache = cache
        self.rng = rng
        self.clock = clock
        self.latencies = latencies
        self.verify_secret = verify_secret
        self.artifact_dir = Path(artifact_dir) if artifact_dir is not None else None
        self.backend_calls = 0

    # -- step 1: obtain the challenge --------------------------------------

    def acquire(self, profile_payload: dict | None, session_id: str | None = None) -> _Acquired:
        self.clock.sleep_ms(self.latencies.acquire_ms)
        if session_id is None:
            status, body = self.transport.request(
                "POST", "/api/session", {"profile": profile_payload}
            )
            if status == 429:
                raise AcquireBlocked(body["error"])
            if status != 200:
                raise GauntletError(f"session refused: {body}")
            session_id = body["session_id"]

        status, body = self.transport.request("POST", "/api/challenge", {"session_id": session_id})
        if status == 429:
            raise AcquireBlocked(body["error"])
        if status != 200:
            raise GauntletError(f"challenge refused: {body}")
        fetched_at = self.clock.now_ms()

        self.clock.sleep_ms(self.latencies.download_ms)
        tiles = self._decode_tiles(body["challenge_id"], body["tiles"])
        if self.clock.now_ms() - fetched_at > body["expires_in_ms"]:
            raise AcquireExpired("challenge payload expired during download")
        return _Acquired(
            session_id=session_id,
            challenge_id=body["challenge_id"],
            target=_parse_target(body["prompt_text"]),
            rounds=body["rounds"],
            tiles=tiles,
        )

    def _decode_tiles(self, challenge_id: str, payload: list[dict]) -> list[tuple[str, np.ndarray]]:
        tiles = [(item["tile_id"], parse_pgm_b64(item["image"])) for item in payload]
        if self.artifact_dir is not None:
            target_dir = self.artifact_dir / challenge_id
            target_dir.mkdir(parents=True, exist_ok=True)
            for tile_id, bitmap in tiles:
                write_pgm(target_dir / f"{tile_id}.pgm", bitmap)
        return tiles

    # -- step 2: solve -------------------------------------------------------

    def solve_round(
        self, tiles: list[tuple[str, np.ndarray]], target: str
    ) -> tuple[list[str], list[TileDecision]]:
        chosen: list[str] = []
        decisions: list[TileDecision] = []
        for tile_id, bitmap in tiles:
            ph = phash64(bitmap)
            label = self.cache.lookup(ph)
            cache_hit = label is not None
            if label is None:
                label = self.backend.label(bitmap, self.rng)
                self.backend_calls += 1
                self.cache.store(ph, label)
            selected = label == target
            if selected:
                chosen.append(tile_id)
            decisions.append(TileDecision(tile_id, label, selected, cache_hit))
        self.clock.sleep_ms(self.latencies.solve_ms)
        return chosen, decisions

    # -- step 3: submit and verify ---------------------------------------------

    def _verify_token(self, token: str) -> bool | None:
        if self.verify_secret is None:
            return None
        status, body = self.transport.request(
            "POST", "/api/siteverify", {"secret": self.verify_secret, "response": token}
        )
        return status == 200 and body.get("success") is True

    # -- full pipeline ------------------------------------------------------------

    def run_session(self, profile_payload: dict) -> SessionRecord:
        """Full acquire -> solve -> submit/verify pipeline for a new session."""
        return self._run(profile_payload, None)

    def run_prepared_session(self, session_id: str) -> SessionRecord:
        """Same pipeline for a session created out of band (burst tests)."""
        return self._run(None, session_id)

    def _run(self, profile_payload: dict | None, session_id: str | None) -> SessionRecord:
        t0 = self.clock.now_ms()
        try:
            acquired = self.acquire(profile_payload, session_id)
        except AcquireBlocked as exc:
            t1 = self.clock.now_ms()
            return self._aborted_record("blocked", str(exc), t0, t1)
        except (AcquireExpired, GauntletError) as exc:
            t1 = self.clock.now_ms()
            return self._aborted_record("error", str(exc), t0, t1)
        t1 = self.clock.now_ms()

        selections: list[list[str]] = []
        decisions: list[list[TileDecision]] = []
        tiles = acquired.tiles
        outcome: str | None = None
        message: str | None = None
        token_verified: bool | None = None
        while True:
            chosen, round_decisions = self.solve_round(tiles, acquired.target)
            selections.append(chosen)
            decisions.append(round_decisions)
            if len(selections) == acquired.rounds:
                break
            # Intermediate submit opens the next round and serves its tiles.
            status, body = self.transport.request(
                "POST",
                "/api/answer",
                {
                    "session_id": acquired.session_id,
                    "challenge_id": acquired.challenge_id,
                    "selections": selections,
                },
            )
            if status == 429:
                outcome, message = "blocked", body["error"]
                break
            if status != 200 or body.get("status") != "round":
                outcome, message = "error", str(body.get("error", body))
                break
            tiles = self._decode_tiles(acquired.challenge_id, body["tiles"])
        t2 = self.clock.now_ms()

        if outcome is None:
            status, body = self.transport.request(
                "POST",
                "/api/answer",
                {
                    "session_id": acquired.session_id,
                    "challenge_id": acquired.challenge_id,
                    "selections": selections,
                },
            )
            if status == 429:
                outcome, message = "blocked", body["error"]
            elif status != 200:
                outcome, message = "error", str(body.get("error", body))
            elif body["status"] == "pass":
                outcome = "pass"
                token_verified = self._verify_token(body["token"])
            else:
                outcome = "fail"
            self.clock.sleep_ms(self.latencies.submit_ms)
        t3 = self.clock.now_ms()

        flat = [d for rnd in decisions for d in rnd]
        return SessionRecord(
            challenge_id=acquired.challenge_id,
            outcome=outcome,
            target=acquired.target,
            rounds=acquired.rounds,
            acquire_ms=t1 - t0,
            solve_ms=t2 - t1,
            submit_verify_ms=t3 - t2,
            total_ms=t3 - t0,
            selections_per_round=[len(s) for s in selections],
            decisions=decisions,
            backend_calls=sum(1 for d in flat if not d.cache_hit),
            cache_hits=sum(1 for d in flat if d.cache_hit),
            token_verified=token_verified,
            message=message,
        )

    def _aborted_record(self, outcome: str, message: str, t0: int, t1: int) -> SessionRecord:
        return SessionRecord(
            challenge_id=None,
            outcome=outcome,
            target=None,
            rounds=0,
            acquire_ms=t1 - t0,
            solve_ms=0,
            submit_verify_ms=0,
            total_ms=t1 - t0,
            selections_per_round=[],
            decisions=[],
            backend_calls=0,
            cache_hits=0,
            token_verified=None,
            message=message,
        )
