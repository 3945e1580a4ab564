"""Command line entry points.

    gauntlet serve  --config <file> [--host H] [--port P]
    gauntlet attack <scenario> [--config <file>] [--seed N] [--out DIR]
                    [--check] [--over-network] [--service-url URL]
    gauntlet report <run-dir>

The GAUNTLET_SEED environment variable overrides the config seed; an
explicit --seed flag overrides both.
"""
from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from .config import SCENARIOS, load_config_data, scenario_config
from .errors import ConfigError, GauntletError
from .scenarios import run_scenario

ENV_SEED = "GAUNTLET_SEED"


def _resolve_seed(flag_seed: int | None) -> int | None:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise click.UsageError(f"{ENV_SEED} must be an integer, got {env!r}")
    return None


@click.group()
def main():
    """Desk-scale CAPTCHA-security evaluation testbed."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Experiment config JSON; service section is used.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8571, show_default=True, type=int)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def serve(config_path: str | None, host: str, port: int, seed: int | None):
    """Run the CAPTCHA service over HTTP until interrupted."""
    from .api import ServiceServer
    from .clockwork import LiveClock
    from .service import CaptchaService

    try:
        file_data = load_config_data(config_path) if config_path else None
        cfg = scenario_config("campaign", file_data, seed=_resolve_seed(seed))
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    service = CaptchaService(cfg.service.build(), cfg.seed, LiveClock())
    server = ServiceServer(service, host=host, port=port).start()
    click.echo(f"serving on {server.base_url} (seed {cfg.seed}); Ctrl+C to stop")
    try:
        import time

        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


@main.command()
@click.argument("scenario", type=click.Choice(SCENARIOS))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Experiment config JSON layered over scenario defaults.")
@click.option("--seed", type=int, default=None, help="Override config and env seed.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory (default runs/<scenario>-seed<seed>).")
@click.option("--check", is_flag=True, help="Exit nonzero if any scenario check fails.")
@click.option("--over-network", is_flag=True,
              help="Run the solver against the service over a real socket.")
@click.option("--service-url", default=None,
              help="Attack an already running `gauntlet serve` instance (implies --over-network).")
def attack(scenario: str, config_path: str | None, seed: int | None, out_dir: str | None,
           check: bool, over_network: bool, service_url: str | None):
    """Run one experiment scenario and write its reports."""
    try:
        file_data = load_config_data(config_path) if config_path else None
        cfg = scenario_config(scenario, file_data, seed=_resolve_seed(seed))
    except ConfigError as exc:
        raise click.UsageError(str(exc))

    out = Path(out_dir) if out_dir else Path("runs") / f"{scenario}-seed{cfg.seed}"
    try:
        if service_url is not None:
            result = _attack_remote(cfg, out, service_url)
        else:
            result = run_scenario(cfg, out, over_network=over_network)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    except GauntletError as exc:
        click.echo(f"scenario failed: {exc}", err=True)
        sys.exit(2)

    for name, ok in sorted(result.checks.items()):
        click.echo(f"[{'PASS' if ok else 'FAIL'}] {name}")
    click.echo(f"report: {out / 'report.json'}")
    if check and not result.ok:
        sys.exit(1)


def _attack_remote(cfg, out: Path, service_url: str):
    """Campaign-style attack against an external service instance."""
    import random

    from .analysis import aggregate_campaign
    from .api import HttpTransport
    from .clockwork import LiveClock
    from .profiles import profile_preset
    from .scenarios import ScenarioResult, _write_outputs
    from .service import _derive_seed
    from .solver import DedupCache, Solver
    from .backends import OracleBackend

    transport = HttpTransport(service_url)
    solver = Solver(
        transport=transport,
        backend=OracleBackend(cfg.solver.build_matrix()),
        cache=DedupCache(cfg.solver.tau),
        rng=random.Random(_derive_seed(cfg.seed, "solver")),
        clock=LiveClock(),
        latencies=cfg.solver.build_latencies(),
        verify_secret=cfg.service.secret if cfg.solver.verify_token else None,
        artifact_dir=(out / "tiles") if cfg.solver.save_images else None,
    )
    profile = profile_preset(cfg.solver.profile).to_json_dict()
    records = [solver.run_session(profile) for _ in range(cfg.counts.sessions)]
    report = aggregate_campaign(records).to_json_dict()
    checks = {"completed": len(records) == cfg.counts.sessions}
    report["checks"] = checks
    records_path = _write_outputs(out, cfg, records, report)
    return ScenarioResult("campaign", report, checks, records_path)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True))
def report(run_dir: str):
    """Re-aggregate records.jsonl from a previous run."""
    from .analysis import aggregate_campaign
    from .solver import SessionRecord, TileDecision

    records_path = Path(run_dir) / "records.jsonl"
    if not records_path.exists():
        raise click.UsageError(f"{records_path} not found")
    records = []
    with records_path.open() as fh:
        for line in fh:
            data = json.loads(line)
            records.append(
                SessionRecord(
                    challenge_id=data["challenge_id"],
                    outcome=data["outcome"],
                    target=data["target"],
                    rounds=data["rounds"],
                    acquire_ms=data["timings_ms"]["acquire"],
                    solve_ms=data["timings_ms"]["solve"],
                    submit_verify_ms=data["timings_ms"]["submit_verify"],
                    total_ms=data["timings_ms"]["total"],
                    selections_per_round=data["selections_per_round"],
                    decisions=[
                        [TileDecision(**d) for d in rnd] for rnd in data["decisions"]
                    ],
                    backend_calls=data["backend_calls"],
                    cache_hits=data["cache_hits"],
                    token_verified=data["token_verified"],
                    message=data["message"],
                )
            )
    summary = aggregate_campaign(records).to_json_dict()
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
