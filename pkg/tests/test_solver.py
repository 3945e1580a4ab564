"""Attacker pipeline: acquisition, dedup cache, submission, timing, isolation."""

import json
import random

import pytest

from gauntlet.api import InProcessTransport
from gauntlet.backends import ConfusionMatrix, OracleBackend
from gauntlet.clockwork import SimulatedClock
from gauntlet.hashkit import phash64
from gauntlet.profiles import profile_preset
from gauntlet.service import _derive_seed
from gauntlet.solver import DedupCache, Solver, StageLatencies
from gauntlet.tiles import SynthSpec, synth_tile

from conftest import build_service

PROFILE = profile_preset("bot_webdriver").to_json_dict()


def make_solver(service, *, backend=None, latencies=StageLatencies(), tau=0,
                verify=True, artifact_dir=None, seed=11):
    return Solver(
        transport=InProcessTransport(service),
        backend=backend or OracleBackend(ConfusionMatrix.identity()),
        cache=DedupCache(tau),
        rng=random.Random(seed),
        clock=service.clock,
        latencies=latencies,
        verify_secret=service.config.secret if verify else None,
        artifact_dir=artifact_dir,
    )


class TestAcquire:
    def test_acquire_decodes_within_ttl(self):
        service = build_service(seed=21)
        solver = make_solver(service)
        acquired = solver.acquire(PROFILE)
        assert len(acquired.tiles) == 9
        assert acquired.target in service.config.categories

    def test_download_latency_beyond_ttl_errors(self):
        service = build_service(seed=22, payload_ttl_ms=5_000)
        solver = make_solver(service, latencies=StageLatencies(download_ms=6_000))
        record = solver.run_session(PROFILE)
        assert record.outcome == "error"
        assert "expired" in record.message

    def test_blocked_at_acquire(self):
        service = build_service(seed=23, concurrency_cap=1)
        service.create_session(profile_preset("regular"))
        solver = make_solver(service)
        record = solver.run_session(PROFILE)
        assert record.outcome == "blocked"
        assert record.solve_ms == 0 and record.submit_verify_ms == 0

    def test_images_persisted_to_artifact_dir(self, tmp_path):
        service = build_service(seed=24)
        solver = make_solver(service, artifact_dir=tmp_path)
        record = solver.run_session(PROFILE)
        saved = list(tmp_path.glob(f"{record.challenge_id}/*.pgm"))
        assert len(saved) == 9 * record.rounds


class TestSolve:
    def test_identity_backend_selects_exact_target_set(self):
        service = build_service(seed=25, double_prompt_probability=0.0)
        solver = make_solver(service)
        acquired = solver.acquire(PROFILE)
        chosen, decisions = solver.solve_round(acquired.tiles, acquired.target)
        truth = service.sessions[acquired.session_id].active_challenge.target_ids(0)
        assert set(chosen) == set(truth)
        assert all(not d.cache_hit for d in decisions)

    def test_bit_exact_repeat_skips_backend(self, spec):
        service = build_service(seed=26)
        solver = make_solver(service)
        repeat = synth_tile("truck", 404, spec)
        solver.cache.store(phash64(repeat), "truck")
        fresh = [(f"x{i}", synth_tile("car", 900 + i, spec)) for i in range(8)]
        tiles = [("rep", repeat)] + fresh
        before = solver.backend_calls
        chosen, decisions = solver.solve_round(tiles, "truck")
        assert solver.backend_calls - before == len(tiles) - 1
        assert decisions[0].cache_hit and chosen == ["rep"]

    def test_forced_mislabel_drops_target_tile(self, spec):
        # confusion row that always relabels truck as car
        cats = tuple(spec.categories)
        import numpy as np

        m = np.eye(len(cats))
        ti, ci = cats.index("truck"), cats.index("car")
        m[ti, ti], m[ti, ci] = 0.0, 1.0
        backend = OracleBackend(ConfusionMatrix(cats, m), spec)
        service = build_service(seed=27)
        solver = make_solver(service, backend=backend)
        tiles = [("a", synth_tile("truck", 1, spec)), ("b", synth_tile("car", 2, spec))]
        chosen, _ = solver.solve_round(tiles, "truck")
        assert chosen == []

    def test_cache_conservation(self):
        service = build_service(seed=28)
        solver = make_solver(service)
        for _ in range(10):
            solver.run_session(PROFILE)
        assert solver.cache.hits + solver.cache.misses == solver.cache.lookups
        assert solver.backend_calls + solver.cache.hits == solver.cache.lookups

    def test_pool_repeats_skip_backend_per_draw_log(self):
        # Forced reuse: one slot per category, so repeats inside and across
        # challenges are bit-exact copies. Backend calls must equal the
        # number of distinct slots seen, straight from the draw log.
        service = build_service(seed=39, reuse_probability=1.0, double_prompt_probability=0.0)
        for cat in service.config.categories:
            service.pool.seed_category(cat, 1)
        solver = make_solver(service)
        first = solver.run_session(PROFILE)
        first_slots = {rec.slot_id for rec in service.pool.draw_log}
        assert first.backend_calls == len(first_slots)
        assert first.cache_hits == 9 - len(first_slots)

        second = solver.run_session(PROFILE)
        second_slots = {rec.slot_id for rec in service.pool.draw_log[9:]}
        assert second.backend_calls == len(second_slots - first_slots)
        assert second.cache_hits == 9 - second.backend_calls


class TestSubmitVerify:
    def test_exact_pass_with_siteverify(self):
        service = build_service(seed=29)
        solver = make_solver(service)
        record = solver.run_session(PROFILE)
        assert record.outcome == "pass"
        assert record.token_verified is True

    def test_empty_selection_fails(self, spec):
        from gauntlet.backends import MultiLabelBackend

        service = build_service(seed=30, double_prompt_probability=0.0)
        # full dropout: every tile resolves to "unknown", nothing matches
        solver = make_solver(service, backend=MultiLabelBackend(spec=spec, dropout=1.0))
        record = solver.run_session(PROFILE)
        assert record.outcome == "fail"
        assert record.selections_per_round == [0]

    def test_second_verify_rejected(self):
        service = build_service(seed=31)
        solver = make_solver(service)
        acquired = solver.acquire(PROFILE)
        chosen, _ = solver.solve_round(acquired.tiles, acquired.target)
        selections = [chosen]
        while len(selections) < acquired.rounds:
            status, body = solver.transport.request(
                "POST", "/api/answer",
                {"session_id": acquired.session_id, "challenge_id": acquired.challenge_id,
                 "selections": selections},
            )
            tiles = solver._decode_tiles(acquired.challenge_id, body["tiles"])
            nxt, _ = solver.solve_round(tiles, acquired.target)
            selections.append(nxt)
        status, body = solver.transport.request(
            "POST", "/api/answer",
            {"session_id": acquired.session_id, "challenge_id": acquired.challenge_id,
             "selections": selections},
        )
        assert body["status"] == "pass"
        assert solver._verify_token(body["token"]) is True
        status, verify = solver.transport.request(
            "POST", "/api/siteverify",
            {"secret": service.config.secret, "response": body["token"]},
        )
        assert verify == {"success": False, "error-codes": ["token-consumed"]}


class TestRunSession:
    def test_documented_latency_split_totals(self):
        clock = SimulatedClock()
        service = build_service(seed=32, clock=clock, double_prompt_probability=0.0)
        solver = make_solver(
            service,
            latencies=StageLatencies(acquire_ms=9_000, solve_ms=3_790, submit_ms=5_970),
        )
        record = solver.run_session(PROFILE)
        assert record.outcome == "pass"
        assert (record.acquire_ms, record.solve_ms, record.submit_verify_ms) == (9_000, 3_790, 5_970)
        assert record.total_ms == 18_760

    def test_zero_latency_stages_sum(self):
        service = build_service(seed=33)
        record = make_solver(service).run_session(PROFILE)
        assert record.total_ms == record.acquire_ms + record.solve_ms + record.submit_verify_ms

    def test_record_json_roundtrip(self):
        service = build_service(seed=34)
        record = make_solver(service).run_session(PROFILE)
        payload = json.dumps(record.to_json_dict(), sort_keys=True)
        data = json.loads(payload)
        assert data["outcome"] == record.outcome
        assert data["timings_ms"]["total"] == record.total_ms


class TestGroundTruthIsolation:
    def test_wire_never_carries_truth(self):
        captured = []

        class SpyTransport(InProcessTransport):
            def request(self, method, path, body=None):
                status, payload = super().request(method, path, body)
                captured.append((method, path, body, status, payload))
                return status, payload

        service = build_service(seed=35, double_prompt_probability=1.0)
        solver = Solver(
            transport=SpyTransport(service),
            backend=OracleBackend(ConfusionMatrix.identity()),
            cache=DedupCache(0),
            rng=random.Random(1),
            clock=service.clock,
            verify_secret=service.config.secret,
        )
        record = solver.run_session(PROFILE)
        assert record.outcome in ("pass", "fail")
        wire_text = json.dumps([(m, p, b, s, pl) for m, p, b, s, pl in captured])
        assert '"truth"' not in wire_text
        assert "pool_origin" not in wire_text

    def test_solver_runs_from_replayed_traffic(self):
        """The solver operates on captured wire responses alone."""
        tape = []

        class RecordingTransport(InProcessTransport):
            def request(self, method, path, body=None):
                result = super().request(method, path, body)
                tape.append(result)
                return result

        class ReplayTransport:
            def __init__(self, tape):
                self.tape = list(tape)

            def request(self, method, path, body=None):
                return self.tape.pop(0)

        service = build_service(seed=36)
        live = Solver(
            transport=RecordingTransport(service),
            backend=OracleBackend(ConfusionMatrix.identity()),
            cache=DedupCache(0),
            rng=random.Random(5),
            clock=service.clock,
            verify_secret=service.config.secret,
        )
        first = live.run_session(PROFILE)

        replay = Solver(
            transport=ReplayTransport(tape),
            backend=OracleBackend(ConfusionMatrix.identity()),
            cache=DedupCache(0),
            rng=random.Random(5),
            clock=SimulatedClock(),
            verify_secret=service.config.secret,
        )
        second = replay.run_session(PROFILE)
        assert second.outcome == first.outcome
        assert [
            [d.to_json_dict() for d in rnd] for rnd in second.decisions
        ] == [[d.to_json_dict() for d in rnd] for rnd in first.decisions]
