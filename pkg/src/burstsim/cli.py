"""Operator entry point.

The CLI is a thin client over the HTTP surface: each subcommand builds a
request from a JSON config file plus flag overrides (flags win), posts it to
the service, and writes the response. By default the app is driven in
process; --server points the same client at a remote instance.

Exit codes: 0 pass, 1 verification fail, 2 configuration error.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import sys
from pathlib import Path

import click
import httpx

from . import __version__
from .costs import rows_to_csv
from .service import create_app

log = logging.getLogger("burstsim")


def _setup_logging() -> None:
    level = os.environ.get("BURST_SIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


async def _post_in_process(path: str, payload: dict) -> httpx.Response:
    transport = httpx.ASGITransport(app=create_app())
    async with httpx.AsyncClient(transport=transport,
                                 base_url="http://burstsim.local",
                                 timeout=300.0) as client:
        return await client.post(path, json=payload)


def _post(server: str | None, path: str, payload: dict) -> dict:
    log.info("POST %s %s", path, payload)
    if server:
        with httpx.Client(base_url=server, timeout=300.0) as client:
            resp = client.post(path, json=payload)
    else:
        resp = asyncio.run(_post_in_process(path, payload))
    if resp.status_code == 422:
        detail = resp.json().get("detail", resp.text)
        if isinstance(detail, list):  # pydantic validation errors
            detail = "; ".join(
                f"{'.'.join(str(p) for p in e.get('loc', []))}: {e.get('msg', '')}"
                for e in detail)
        raise click.UsageError(str(detail))
    if resp.status_code != 200:
        raise click.ClickException(f"{path} returned {resp.status_code}: "
                                   f"{resp.text[:500]}")
    return resp.json()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise click.UsageError(f"config file {path}: {e}")
    if not isinstance(data, dict):
        raise click.UsageError(f"config file {path} must hold a JSON object")
    return data


def _payload(config: str | None, **flags) -> dict:
    payload = _load_config(config)
    for key, value in flags.items():
        if value is not None:
            payload[key] = value
    return payload


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        click.echo(text, nl=False)


def _canonical(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


_shared = [
    click.option("--config", type=click.Path(), default=None,
                 help="JSON file with request fields; flags override it."),
    click.option("--mode", type=str, default=None,
                 help="burst | burst_no_lao | ring_reference | dense"),
    click.option("--gpus", type=int, default=None, help="Ring size G."),
    click.option("--seq", type=int, default=None, help="Sequence length N."),
    click.option("--dim", type=int, default=None, help="Head dimension d."),
    click.option("--heads", type=int, default=None, help="Attention heads Z."),
    click.option("--batch", type=int, default=None, help="Batch size B."),
    click.option("--seed", type=int, default=None, help="PRNG seed."),
    click.option("--mask", type=str, default=None,
                 help="none | causal | path to a block-grid JSON file."),
    click.option("--overlap", type=click.Choice(["none", "double_buffer"]),
                 default=None),
    click.option("--precision", type=click.Choice(["double", "single"]),
                 default=None),
    click.option("--executor", type=click.Choice(["lockstep", "threaded"]),
                 default=None),
    click.option("--tile-rows", "tile_rows", type=int, default=None),
    click.option("--tile-cols", "tile_cols", type=int, default=None),
    click.option("--pad/--no-pad", "pad", default=None,
                 help="Zero-pad when gpus does not divide seq."),
    click.option("--bandwidth", type=float, default=None,
                 help="Modeled link bandwidth, bytes per virtual second."),
    click.option("--flops-rate", "flops_rate", type=float, default=None,
                 help="Modeled compute rate, flops per virtual second."),
    click.option("--sram-bytes", "sram_bytes", type=int, default=None,
                 help="Modeled SRAM budget used to derive tile sizes."),
    click.option("--tol-forward", "tol_forward", type=float, default=None),
    click.option("--tol-backward", "tol_backward", type=float, default=None),
    click.option("--out", type=click.Path(), default=None,
                 help="Write the report here instead of stdout."),
]


def shared_options(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(version=__version__, prog_name="burstsim")
@click.option("--server", type=str, default=None, envvar="BURST_SIM_SERVER",
              help="Base URL of a running service; default runs in process.")
@click.pass_context
def main(ctx, server):
    """Simulated ring attention: verification, sweeps, costs, traces."""
    _setup_logging()
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@shared_options
@click.option("--format", "fmt", type=click.Choice(["json"]), default="json")
@click.pass_context
def verify(ctx, config, out, fmt, **flags):
    """Run one mode forward+backward and compare against the dense oracle."""
    payload = _payload(config, **flags)
    report = _post(ctx.obj["server"], "/verify", payload)
    _emit(_canonical(report), out)
    if report["verdict"] != "pass":
        sys.exit(1)


@main.command()
@shared_options
@click.option("--grid-gpus", "gs", type=str, default=None,
              help="Comma-separated G values, e.g. 2,4,8.")
@click.option("--grid-seq", "ns", type=str, default=None,
              help="Comma-separated N values, e.g. 8,16,32.")
@click.option("--cap", type=int, default=None, help="Refuse larger grids.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
              default="csv")
@click.pass_context
def sweep(ctx, config, out, fmt, gs, ns, cap, **flags):
    """Measured ledger counts vs modeled costs over a (G, N) grid."""
    payload = _payload(config, **flags)
    for key, raw in (("gs", gs), ("ns", ns)):
        if raw is not None:
            try:
                payload[key] = [int(x) for x in raw.split(",") if x.strip()]
            except ValueError:
                raise click.UsageError(f"--grid values must be integers: {raw!r}")
    if cap is not None:
        payload["cap"] = cap
    report = _post(ctx.obj["server"], "/sweep", payload)
    if fmt == "csv":
        _emit(rows_to_csv(report["rows"]), out)
    else:
        _emit(_canonical(report), out)


@main.command()
@shared_options
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
              default="json")
@click.pass_context
def cost(ctx, config, out, fmt, **flags):
    """Evaluate the analytical cost model for every method at one spec."""
    payload = _payload(config, **flags)
    report = _post(ctx.obj["server"], "/cost", payload)
    if fmt == "csv":
        rows = []
        for name in sorted(report["methods"]):
            row = {"method": name}
            row.update({k: v for k, v in report["methods"][name].items()
                        if not k.endswith("_formula") and k != "io_formula"})
            rows.append(row)
        _emit(rows_to_csv(rows), out)
    else:
        _emit(_canonical(report), out)


@main.command()
@shared_options
@click.pass_context
def trace(ctx, config, out, **flags):
    """Dump the virtual-time event schedule as newline-delimited JSON."""
    payload = _payload(config, **flags)
    report = _post(ctx.obj["server"], "/trace", payload)
    _emit(report["events_ndjson"], out)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8711, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    _setup_logging()
    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
