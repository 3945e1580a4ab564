"""The simulated image-CAPTCHA service.

Owns sessions, challenge issuance, probabilistic grading, rate gates with
bit-exact client-visible error strings, single-use response tokens, the
server-side verify endpoint, fingerprint logging and the publisher credit
ledger. All shared state is mutated under one lock; a simulated-clock mode
makes single-threaded runs bit-reproducible.
"""
from __future__ import annotations

import hashlib
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Sequence

from .clockwork import Clock, SimulatedClock
from .core import (
    Category,
    Challenge,
    DEFAULT_CATEGORIES,
    GradeCondition,
    GradePolicy,
    ImageTile,
    challenge_pass_probability,
    condition_of,
    validate_categories,
)
from .errors import BlockedError, ConfigError, ExpiredChallengeError, GauntletError, InvalidSelectionError
from .profiles import ClientProfile
from .tiles import SynthSpec, TilePool

MSG_TOO_MANY_REQUESTS = "Your computer or network has sent too many requests."
MSG_RATE_LIMITED = "Rate limited or network error. Please retry."

# Publisher credit per successful solve, fixed so that the documented
# 259-solve campaign earns 0.0717 HMT to within one rate unit.
DEFAULT_PER_SOLVE_RATE = Decimal("0.000276833977")

DEFAULT_SELECTION_WEIGHTS: dict[int, float] = {
    1: 0.06,
    2: 0.22,
    3: 0.26,
    4: 0.20,
    5: 0.12,
    6: 0.08,
    7: 0.06,
}


@dataclass(frozen=True)
class DifficultyProfile:
    """Derived knobs for one difficulty level."""

    name: str
    double_prompt_probability: float
    flexibility_scale: float

    def __post_init__(self):
        if not 0.0 <= self.double_prompt_probability <= 1.0:
            raise ConfigError("double_prompt_probability must be in [0, 1]")
        if not 0.0 < self.flexibility_scale <= 1.0:
            raise ConfigError("flexibility_scale must be in (0, 1]")


DIFFICULTY_LEVELS: dict[str, DifficultyProfile] = {
    "easy": DifficultyProfile("easy", 0.05, 1.0),
    "moderate": DifficultyProfile("moderate", 0.15, 1.0),
    "difficult": DifficultyProfile("difficult", 0.40, 0.8),
    "always_on": DifficultyProfile("always_on", 0.60, 0.6),
}


def threat_score(profile: ClientProfile) -> float:
    """Suspiciousness in [0, 1], monotone in every bot signal.

    Saturating weighted sum: webdriver 0.4, headless 0.3, zero input
    events 0.3, zero plugins 0.2."""
    no_events = (
        profile.keypress_events == 0
        and profile.scroll_events == 0
        and profile.touch_events == 0
    )
    score = (
        0.4 * profile.webdriver
        + 0.3 * profile.headless
        + 0.3 * no_events
        + 0.2 * (profile.plugin_count == 0)
    )
    return min(1.0, score)


@dataclass
class HmtLedger:
    """Publisher credit: balance is the exact sum of credited amounts."""

    per_solve_rate: Decimal = DEFAULT_PER_SOLVE_RATE
    flagged_sessions_earn: bool = True
    balance: Decimal = Decimal(0)
    solves: int = 0

    def credit(self, session_flagged: bool, passed: bool) -> None:
        if not passed:
            return
        if session_flagged and not self.flagged_sessions_earn:
            return
        self.balance += self.per_solve_rate
        self.solves += 1


def credit_hmt(ledger: HmtLedger, session: "SessionState", passed: bool) -> HmtLedger:
    ledger.credit(session.profile.flagged_automated, passed)
    return ledger


@dataclass
class RateLimiterState:
    """Gates: per-session submit gap, global concurrency cap, per-IP window.

    Blocked requests are not recorded anywhere, so refusals leave all
    observable service state untouched."""

    min_submit_gap_ms: int = 0
    concurrency_cap: int = 100
    ip_window_ms: int = 60_000
    ip_window_max: int = 1_000_000
    in_flight: int = 0
    windows: dict[str, deque] = field(default_factory=dict)

    def admit_request(self, ip_tag: str, now: int) -> None:
        window = self.windows.setdefault(ip_tag, deque())
        while window and window[0] <= now - self.ip_window_ms:
            window.popleft()
        if len(window) >= self.ip_window_max:
            raise BlockedError(MSG_TOO_MANY_REQUESTS)
        window.append(now)

    def admit_session(self, ip_tag: str, now: int) -> None:
        if self.in_flight >= self.concurrency_cap:
            raise BlockedError(MSG_TOO_MANY_REQUESTS)
        self.admit_request(ip_tag, now)
        self.in_flight += 1

    def session_closed(self) -> None:
        if self.in_flight > 0:
            self.in_flight -= 1

    def admit_submit(self, last_submit_at: int | None, now: int) -> None:
        if last_submit_at is not None and now - last_submit_at < self.min_submit_gap_ms:
            raise BlockedError(MSG_RATE_LIMITED)


@dataclass
class SessionState:
    session_id: str
    profile: ClientProfile
    created_at: int
    last_submit_at: int | None = None
    active_challenge: Challenge | None = None
    round_issued_at: list[int] = field(default_factory=list)
    submitted_rounds: list[frozenset[str]] = field(default_factory=list)
    verified: bool = False
    closed: bool = False

    @property
    def flagged(self) -> bool:
        return self.profile.flagged_automated


@dataclass
class TokenRecord:
    token: str
    session_id: str
    issued_at: int
    consumed: bool = False


@dataclass(frozen=True)
class GradeResult:
    status: str  # "pass" | "fail"
    token: str | None = None


@dataclass(frozen=True)
class NextRound:
    round_index: int
    tiles: tuple[ImageTile, ...]
    expires_in_ms: int


@dataclass(frozen=True)
class ServiceConfig:
    categories: tuple[Category, ...] = DEFAULT_CATEGORIES
    tiles_per_round: int = 9
    payload_ttl_ms: int = 5_000
    token_ttl_ms: int = 120_000
    session_ttl_ms: int = 120_000
    secret: str = "desk-scale-secret"
    difficulty: str = "moderate"
    double_prompt_probability: float | None = None  # overrides difficulty knob
    flexibility_scale: float | None = None  # overrides difficulty knob
    selection_weights: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_SELECTION_WEIGHTS)
    )
    reuse_probability: float = 0.2039
    min_submit_gap_ms: int = 0
    concurrency_cap: int = 100
    ip_window_ms: int = 60_000
    ip_window_max: int = 1_000_000
    per_solve_rate: Decimal = DEFAULT_PER_SOLVE_RATE
    flagged_sessions_earn: bool = True
    adaptive: bool = False
    policy: GradePolicy = field(default_factory=GradePolicy.default)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self):
        validate_categories(self.categories)
        if self.difficulty not in DIFFICULTY_LEVELS:
            raise ConfigError(f"unknown difficulty {self.difficulty!r}")
        if self.tiles_per_round < 1:
            raise ConfigError("tiles_per_round must be >= 1")
        weights = self.selection_weights
        if not weights:
            raise ConfigError("selection_weights must be non-empty")
        total = sum(weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"selection_weights must sum to 1, got {total}")
        for n, w in weights.items():
            if not 1 <= n <= self.tiles_per_round:
                raise ConfigError(f"selection weight key {n} outside 1..{self.tiles_per_round}")
            if w < 0:
                raise ConfigError("selection weights must be >= 0")
        if set(self.categories) != set(self.synth.waves):
            raise ConfigError("synth spec categories must match service categories")

    @property
    def difficulty_profile(self) -> DifficultyProfile:
        base = DIFFICULTY_LEVELS[self.difficulty]
        dpp = self.double_prompt_probability
        fs = self.flexibility_scale
        if dpp is None and fs is None:
            return base
        return DifficultyProfile(
            base.name,
            base.double_prompt_probability if dpp is None else dpp,
            base.flexibility_scale if fs is None else fs,
        )


def _derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class CaptchaService:
    """In-process service core; the JSON API layer is a thin shim over it."""

    def __init__(self, config: ServiceConfig, seed: int, clock: Clock | None = None):
        self.config = config
        self.seed = seed
        self.clock: Clock = clock if clock is not None else SimulatedClock()
        self.lock = threading.RLock()

        # Named streams: grading randomness is reproducible independently
        # of content randomness, and pool reuse independently of both.
        self._content_rng = random.Random(_derive_seed(seed, "content"))
        self._grade_rng = random.Random(_derive_seed(seed, "grade"))
        self._token_key = _derive_seed(seed, "token")

        self.pool = TilePool(
            config.synth,
            reuse_probability=config.reuse_probability,
            rng=random.Random(_derive_seed(seed, "pool")),
            seed_base=_derive_seed(seed, "tile-seeds") & 0x7FFF_FFFF_FFFF,
        )
        self.sessions: dict[str, SessionState] = {}
        self.tokens: dict[str, TokenRecord] = {}
        self.ledger = HmtLedger(
            per_solve_rate=config.per_solve_rate,
            flagged_sessions_earn=config.flagged_sessions_earn,
        )
        self.limiter = RateLimiterState(
            min_submit_gap_ms=config.min_submit_gap_ms,
            concurrency_cap=config.concurrency_cap,
            ip_window_ms=config.ip_window_ms,
            ip_window_max=config.ip_window_max,
        )
        self.fingerprint_log: list[tuple[str, ClientProfile]] = []
        self._session_counter = 0
        self._challenge_counter = 0
        self._token_counter = 0
        self._open_sessions: list[str] = []

        base = config.difficulty_profile
        self._base_difficulty = base
        self._base_policy = config.policy.scaled(base.flexibility_scale)

        # Weighted target-count sampler with a deterministic key order.
        self._weight_items = sorted(config.selection_weights.items())

    # -- internals ---------------------------------------------------------

    def now_ms(self) -> int:
        return self.clock.now_ms()

    def _prune_expired_sessions(self, now: int) -> None:
        ttl = self.config.session_ttl_ms
        keep: list[str] = []
        for sid in self._open_sessions:
            sess = self.sessions[sid]
            if not sess.closed and now - sess.created_at >= ttl:
                sess.closed = True
                self.limiter.session_closed()
            elif not sess.closed:
                keep.append(sid)
        self._open_sessions = keep

    def _close_session(self, session: SessionState) -> None:
        if not session.closed:
            session.closed = True
            session.active_challenge = None
            self.limiter.session_closed()

    def _draw_target_count(self) -> int:
        u = self._content_rng.random()
        acc = 0.0
        for n, w in self._weight_items:
            acc += w
            if u < acc:
                return n
        return self._weight_items[-1][0]

    def _session_knobs(self, profile: ClientProfile) -> tuple[float, GradePolicy]:
        """(double-prompt probability, effective policy) for one session."""
        base = self._base_difficulty
        if not self.config.adaptive:
            return base.double_prompt_probability, self._base_policy
        score = threat_score(profile)
        beta = base.double_prompt_probability + score * (0.60 - base.double_prompt_probability)
        beta = min(1.0, max(base.double_prompt_probability, beta))
        phi = base.flexibility_scale - score * (base.flexibility_scale - 0.6)
        return beta, self.config.policy.scaled(phi)

    # -- session lifecycle ---------------------------------------------------

    def create_session(self, profile: ClientProfile, now: int | None = None) -> SessionState:
        with self.lock:
            now = self.now_ms() if now is None else now
            self._prune_expired_sessions(now)
            self.limiter.admit_session(profile.ip_tag, now)
            self._session_counter += 1
            session = SessionState(
                session_id=f"s{self._session_counter:08d}",
                profile=profile,
                created_at=now,
            )
            self.sessions[session.session_id] = session
            self._open_sessions.append(session.session_id)
            self.fingerprint_log.append((session.session_id, profile))
            return session

    def _get_session(self, session_id: str) -> SessionState:
        session = self.sessions.get(session_id)
        if session is None:
            raise GauntletError(f"unknown session {session_id!r}")
        if session.closed:
            raise GauntletError(f"session {session_id!r} is closed")
        return session

    # -- challenges ------------------------------------------------------------

    def issue_challenge(self, session_id: str, now: int | None = None) -> Challenge:
        with self.lock:
            now = self.now_ms() if now is None else now
            session = self._get_session(session_id)
            active = session.active_challenge
            if active is not None:
                if now <= session.round_issued_at[0] + self.config.payload_ttl_ms:
                    raise GauntletError("session already has an active challenge")
                session.active_challenge = None
            self.limiter.admit_request(session.profile.ip_tag, now)

            beta, _ = self._session_knobs(session.profile)
            rounds = 2 if self._content_rng.random() < beta else 1
            target = self._content_rng.choice(self.config.categories)
            m = self.config.tiles_per_round

            tile_rounds: list[tuple[ImageTile, ...]] = []
            for _ in range(rounds):
                n_targets = min(self._draw_target_count(), m)
                positions = set(self._content_rng.sample(range(m), n_targets))
                tiles = []
                others = [c for c in self.config.categories if c != target]
                for i in range(m):
                    if i in positions:
                        tiles.append(self.pool.draw(target))
                    else:
                        tiles.append(self.pool.draw(self._content_rng.choice(others)))
                tile_rounds.append(tuple(tiles))

            self._challenge_counter += 1
            challenge = Challenge(
                challenge_id=f"ch{self._challenge_counter:08d}",
                prompt_text=f"Please click each image containing a {target}",
                target=target,
                rounds=rounds,
                tile_rounds=tuple(tile_rounds),
                issued_at=now,
                expires_at=now + self.config.payload_ttl_ms,
            )
            session.active_challenge = challenge
            session.round_issued_at = [now]
            session.submitted_rounds = []
            return challenge

    # -- grading -----------------------------------------------------------------

    def submit(
        self,
        session_id: str,
        challenge_id: str,
        selections: Sequence[Sequence[str]],
        now: int | None = None,
    ) -> GradeResult | NextRound:
        """Grade a cumulative selection.

        For double-prompt challenges the first call carries round 1 only
        and yields the round-2 payload; the final call carries every round
        and produces the grade. Each accepted round must arrive before its
        own payload deadline."""
        with self.lock:
            now = self.now_ms() if now is None else now
            session = self._get_session(session_id)
            challenge = session.active_challenge
            if challenge is None or challenge.challenge_id != challenge_id:
                raise InvalidSelectionError(f"no active challenge {challenge_id!r}")

            self.limiter.admit_submit(session.last_submit_at, now)

            done = len(session.submitted_rounds)
            if len(selections) != done + 1:
                raise InvalidSelectionError(
                    f"expected {done + 1} round selections, got {len(selections)}"
                )
            for i in range(done):
                if frozenset(selections[i]) != session.submitted_rounds[i]:
                    raise InvalidSelectionError(f"round {i + 1} selection changed between submits")

            new_round = done
            if now > session.round_issued_at[new_round] + self.config.payload_ttl_ms:
                session.active_challenge = None
                raise ExpiredChallengeError("challenge expired")

            chosen = frozenset(selections[new_round])
            if len(chosen) != len(list(selections[new_round])):
                raise InvalidSelectionError("duplicate tile ids in selection")
            # Validate ids eagerly so a bad selection fails loudly now.
            condition_of(
                challenge.tile_rounds[new_round], challenge.target, chosen, challenge.prompt_type
            )
            session.last_submit_at = now
            session.submitted_rounds.append(chosen)

            if len(session.submitted_rounds) < challenge.rounds:
                session.round_issued_at.append(now)
                return NextRound(
                    round_index=len(session.submitted_rounds),
                    tiles=challenge.tile_rounds[len(session.submitted_rounds)],
                    expires_in_ms=self.config.payload_ttl_ms,
                )

            return self._grade(session, challenge, now)

    def _grade(self, session: SessionState, challenge: Challenge, now: int) -> GradeResult:
        conditions: list[GradeCondition] = []
        for idx, chosen in enumerate(session.submitted_rounds):
            conditions.append(
                condition_of(challenge.tile_rounds[idx], challenge.target, chosen, challenge.prompt_type)
            )
        _, policy = self._session_knobs(session.profile)
        p = challenge_pass_probability(conditions, policy)
        passed = self._grade_rng.random() < p

        if passed:
            session.verified = True
            token = self._mint_token(session.session_id, now)
            credit_hmt(self.ledger, session, True)
            self._close_session(session)
            return GradeResult(status="pass", token=token.token)
        credit_hmt(self.ledger, session, False)
        self._close_session(session)
        return GradeResult(status="fail")

    # -- tokens ---------------------------------------------------------------

    def _mint_token(self, session_id: str, now: int) -> TokenRecord:
        self._token_counter += 1
        raw = hashlib.sha256(f"{self._token_key}:{self._token_counter}".encode()).hexdigest()
        record = TokenRecord(token=raw[:32], session_id=session_id, issued_at=now)
        self.tokens[record.token] = record
        return record

    def siteverify(self, secret: str, token: str, now: int | None = None) -> tuple[bool, list[str]]:
        """Server-side token check; never raises. Returns (success, codes)."""
        with self.lock:
            now = self.now_ms() if now is None else now
            codes: list[str] = []
            if secret != self.config.secret:
                codes.append("invalid-secret")
            record = self.tokens.get(token)
            if record is None:
                codes.append("invalid-token")
            elif record.consumed:
                codes.append("token-consumed")
            elif now - record.issued_at > self.config.token_ttl_ms:
                codes.append("token-expired")
            if codes:
                return False, codes
            assert record is not None
            record.consumed = True
            return True, []

    # -- observability -----------------------------------------------------------

    def ledger_snapshot(self) -> dict:
        with self.lock:
            return {"hmt_balance": str(self.ledger.balance), "solves": self.ledger.solves}

    def state_snapshot(self) -> tuple:
        """Cheap fingerprint of all externally meaningful state; used to
        prove blocked requests mutate nothing."""
        with self.lock:
            return (
                tuple(sorted(self.sessions)),
                tuple(
                    (s.session_id, s.closed, s.verified, s.last_submit_at,
                     None if s.active_challenge is None else s.active_challenge.challenge_id)
                    for s in self.sessions.values()
                ),
                str(self.ledger.balance),
                self.ledger.solves,
                self.pool.draw_count,
                tuple(sorted(self.tokens)),
                self.limiter.in_flight,
            )
