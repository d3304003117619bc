"""Command-line interface: thin client over the core package and the service.

Every subcommand exits 0 on success; failures print machine-readable error
JSON to stderr and exit nonzero.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .augmentation import AugmentationConfig, augment_dataset
from .config import ConfigError, load_config
from .domain import (
    LabeledUtterance,
    Origin,
    load_dataset,
    validate_dataset,
)


def _fail(message: str, **details) -> None:
    payload = {"error": message}
    payload.update(details)
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


def _load_config(path: str):
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail("invalid configuration", problems=exc.problems)


@click.group()
def main() -> None:
    """Hybrid intent detection: train, evaluate, route, and serve."""


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--intents", "intents_path", required=True, type=click.Path(exists=True))
def validate(dataset_path: str, intents_path: str) -> None:
    """Check dataset invariants; nonzero exit when any are violated."""
    try:
        dataset = load_dataset(dataset_path, intents_path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        _fail(f"cannot parse dataset: {exc}")
    violations = validate_dataset(dataset)
    for violation in violations:
        click.echo(str(violation))
    if violations:
        _fail("dataset is invalid", violations=[str(v) for v in violations])
    click.echo(
        f"ok: {len(dataset.intents)} intents, {len(dataset.train)} train, "
        f"{len(dataset.valid_in_scope)} in-scope valid, {len(dataset.valid_oos)} OOS valid"
    )


@main.command()
@click.option("--in", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out", "output_path", required=True, type=click.Path())
@click.option("--ratio", default=0.2, show_default=True)
@click.option("--replace-string-len", default=5, show_default=True)
@click.option("--removal-prob", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def augment(
    input_path: str,
    output_path: str,
    ratio: float,
    replace_string_len: int,
    removal_prob: float,
    seed: int,
) -> None:
    """Synthesize OOS negatives from the train rows of a JSONL file."""
    train: list[LabeledUtterance] = []
    for line in Path(input_path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("split", "train") == "train":
            train.append(
                LabeledUtterance(
                    text=obj["text"],
                    gold_labels=frozenset(obj.get("labels", [])),
                    origin=Origin(obj.get("origin", "human")),
                )
            )
    if not train:
        _fail("no train rows found in input")
    try:
        cfg = AugmentationConfig(
            ratio=ratio, replace_string_len=replace_string_len, removal_prob=removal_prob, seed=seed
        )
    except ValueError as exc:
        _fail(str(exc))
    augmented = augment_dataset(train, cfg)
    with Path(output_path).open("w", encoding="utf-8") as fh:
        for utt in augmented:
            fh.write(
                json.dumps(
                    {"text": utt.text, "labels": [], "split": "train", "origin": "augmented"},
                    ensure_ascii=False,
                )
                + "\n"
            )
    click.echo(f"wrote {len(augmented)} augmented utterances to {output_path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def train(config_path: str) -> None:
    """Build and persist the serving artifacts (head, store)."""
    from .pipeline import build_bundle, save_artifacts

    cfg = _load_config(config_path)
    bundle = build_bundle(cfg)
    paths = save_artifacts(bundle, cfg)
    final_loss = bundle.head.epoch_losses[-1] if bundle.head.epoch_losses else float("nan")
    click.echo(
        f"trained head over {len(bundle.dataset.train)} rows "
        f"({len(bundle.dataset.intents)} intents), final loss {final_loss:.6f}"
    )
    for name, path in paths.items():
        click.echo(f"  {name}: {path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option(
    "--system",
    type=click.Choice(["classifier", "llm", "hybrid", "two_step"]),
    default="hybrid",
    show_default=True,
)
@click.option("--grid", default="", help="Comma-separated retrieval dimensions to sweep: k,t")
@click.option("--theta", default="auto", show_default=True, help="Two-step threshold or 'auto'")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def evaluate(config_path: str, system: str, grid: str, theta: str, out_path: str, csv_path: str | None) -> None:
    """Evaluate one system over the validation split and write a report."""
    from .evaluation import write_report
    from .pipeline import PipelineError, evaluate_system

    cfg = _load_config(config_path)
    dims = tuple(d for d in grid.split(",") if d)
    try:
        report = evaluate_system(cfg, system, grid=dims, theta=theta)
    except PipelineError as exc:
        _fail(str(exc))
    write_report(report, out_path, csv_path)
    click.echo(f"wrote report to {out_path}")
    for name, row in report["datasets"].items():
        f1 = row.get("f1")
        click.echo(f"  {name}: f1={f1:.4f}" if f1 is not None else f"  {name}: f1=n/a")


@main.command()
@click.option("--query", required=True)
@click.option("--server", default=None, help="Base URL of a running service")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def route(query: str, server: str | None, config_path: str | None) -> None:
    """Route one query, either against a running server or in process."""
    if server:
        import httpx

        try:
            resp = httpx.post(f"{server.rstrip('/')}/v1/predict", json={"query": query}, timeout=60.0)
        except httpx.HTTPError as exc:
            _fail(f"request failed: {exc}")
        if resp.status_code != 200:
            _fail(f"server returned HTTP {resp.status_code}", body=resp.text)
        click.echo(json.dumps(resp.json(), indent=2))
        return
    if not config_path:
        _fail("either --server or --config is required")
    from .pipeline import build_bundle
    from .router import route as route_query

    cfg = _load_config(config_path)
    bundle = build_bundle(cfg)
    prediction = route_query(query, bundle.router_deps(), bundle.policy)
    click.echo(
        json.dumps(
            {
                "labels": sorted(prediction.labels),
                "source": prediction.source.value,
                "uncertainty": prediction.uncertainty,
                "scores": prediction.scores,
                "latency_ms": prediction.latency.as_dict(),
            },
            indent=2,
        )
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
def serve(config_path: str, host: str, port: int) -> None:
    """Start the HTTP prediction service."""
    import uvicorn

    from .service import create_app_from_config

    app = create_app_from_config(config_path)
    uvicorn.run(app, host=host, port=port)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def descriptions(config_path: str) -> None:
    """Generate intent descriptions through the configured LLM and cache them."""
    from .pipeline import build_bundle, generate_descriptions

    cfg = _load_config(config_path)
    bundle = build_bundle(cfg)
    generated = generate_descriptions(cfg, bundle)
    click.echo(f"cached {len(generated)} descriptions in {cfg.artifacts_dir / 'descriptions.json'}")


@main.group()
def oos2() -> None:
    """Two-step OOS detection over internal representations."""


@oos2.command("build-bank")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_prefix", required=True, type=click.Path())
def oos2_build_bank(config_path: str, out_prefix: str) -> None:
    """Build and persist the per-intent representation bank."""
    from .llm import HashingRepresentationProvider
    from .oos_twostep import build_bank
    from .pipeline import build_bundle

    cfg = _load_config(config_path)
    bundle = build_bundle(cfg)
    provider = HashingRepresentationProvider(cfg.embedding.dim)
    bank = build_bank(bundle.dataset, provider, cfg.two_step.template_id)
    bank.save(out_prefix)
    counts = ", ".join(f"{k}={v}" for k, v in bank.row_counts().items())
    click.echo(f"bank saved to {out_prefix} ({counts})")


@oos2.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--theta", default="auto", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def oos2_eval(config_path: str, theta: str, out_path: str) -> None:
    """Evaluate the two-step detector; theta 'auto' calibrates on validation."""
    from .evaluation import write_report
    from .pipeline import evaluate_system

    cfg = _load_config(config_path)
    report = evaluate_system(cfg, "two_step", theta=theta)
    write_report(report, out_path)
    click.echo(f"wrote report to {out_path}")


@main.group()
def labspace() -> None:
    """Controlled label-space experiments."""


@labspace.command("run")
@click.option("--system", type=click.Choice(["mock-oracle", "classifier"]), default="classifier")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--scopes", default="1,2,3,4,5", show_default=True)
@click.option("--labels", "label_counts", default="1,2,3,4,5", show_default=True)
@click.option("--repeats", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--leaves", "leaves_path", type=click.Path(exists=True), default=None)
def labspace_run(
    system: str,
    out_path: str,
    scopes: str,
    label_counts: str,
    repeats: int,
    seed: int,
    leaves_path: str | None,
) -> None:
    """Sweep (scope, label count) cells and write the curve table."""
    from .labspace import SYSTEMS, load_leaves, run_grid, write_curves_csv

    leaves = load_leaves(leaves_path)
    results = run_grid(
        SYSTEMS[system](),
        scopes=[int(s) for s in scopes.split(",")],
        label_counts=[int(l) for l in label_counts.split(",")],
        repeats=repeats,
        master_seed=seed,
        leaves=leaves,
    )
    write_curves_csv(results, out_path)
    ok = sum(1 for r in results if r.status == "ok")
    truncated = sum(1 for r in results if r.status == "truncated")
    click.echo(f"wrote {len(results)} cells to {out_path} ({ok} ok, {truncated} truncated)")


if __name__ == "__main__":
    main()
