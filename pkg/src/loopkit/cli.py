"""Command-line interface orchestrating the full pipeline.

Exit codes: 0 ok, 2 invalid input, 3 insufficient data, 1 other errors.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import audio, evaluate, pipeline, store
from .errors import InsufficientData, InvalidInput, LoopkitError
from .negatives import SamplingConfig
from .nn import models
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.train import TrainConfig, train
from .records import STRATEGIES
from .scoring import SCORER_KINDS, LoopScorer

EXIT_INVALID = 2
EXIT_INSUFFICIENT = 3


def parse_config(path) -> dict[str, str]:
    """key=value override file; blank lines and # comments ignored."""
    overrides = {}
    if path is None:
        return overrides
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidInput(f"bad config line (expected key=value): {line!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InvalidInput as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_INVALID)
        except InsufficientData as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_INSUFFICIENT)
        except LoopkitError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
@click.option("--seed", default=0, show_default=True, help="Global random seed.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="key=value override file.")
@click.option("--jobs", default=1, show_default=True,
              help="Parallel workers for per-song stages.")
@click.option("-w", "--workspace", default="workspace", show_default=True,
              help="Workspace directory.")
@click.pass_context
def main(ctx, seed, config_path, jobs, workspace):
    """Loop extraction, compatibility models, and mashability baseline."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    ctx.obj = {"seed": seed, "overrides": parse_config(config_path),
               "jobs": jobs, "workspace": workspace}


def _pipeline_config(obj) -> pipeline.PipelineConfig:
    o = obj["overrides"]
    return pipeline.PipelineConfig(
        seed=int(o.get("seed", obj["seed"])),
        ntf_rank=int(o["ntf_rank"]) if "ntf_rank" in o else None,
        ntf_iters=int(o.get("ntf_iters", 200)),
        frames_per_bar=int(o.get("frames_per_bar", 64)),
        pair_threshold=float(o.get("pair_threshold", 0.2)),
        max_loops_per_song=(int(o["max_loops_per_song"])
                            if "max_loops_per_song" in o else None),
        jobs=obj["jobs"])


def _manifest(obj) -> store.Manifest:
    return store.Manifest.load(store.workspace_paths(obj["workspace"])["manifest"])


@main.command()
@click.argument("song_list", type=click.Path(exists=True))
@click.pass_obj
@handle_errors
def ingest(obj, song_list):
    """Validate and canonicalize songs listed in SONG_LIST (JSON/JSONL)."""
    manifest = store.ingest(song_list, obj["workspace"])
    click.echo(f"ingested {len(manifest.songs)} songs")


@main.command()
@click.pass_obj
@handle_errors
def extract(obj):
    """NTF loop extraction for all ingested songs."""
    manifest = pipeline.stage_extract(obj["workspace"], _pipeline_config(obj))
    done = sum(1 for k in manifest.stages if k.startswith("extract:"))
    click.echo(f"extracted {done}/{len(manifest.songs)} songs")


@main.command()
@click.pass_obj
@handle_errors
def dedup(obj):
    """Average-hash deduplication and layout refinement."""
    manifest = pipeline.stage_dedup(obj["workspace"], _pipeline_config(obj))
    done = sum(1 for k in manifest.stages if k.startswith("dedup:"))
    click.echo(f"deduplicated {done} songs")


@main.command()
@click.pass_obj
@handle_errors
def pairs(obj):
    """Derive positive pairs and render loop audio."""
    manifest = pipeline.stage_pairs(obj["workspace"], _pipeline_config(obj))
    click.echo(f"{len(manifest.loops)} loops, "
               f"{len(manifest.positives())} positive pairs")


@main.command()
@click.option("--strategy", type=click.Choice(STRATEGIES + ("equal",)),
              default="equal", show_default=True)
@click.option("--ratio", default=1.0, show_default=True,
              help="Negatives per positive.")
@click.option("--seed", "neg_seed", default=None, type=int,
              help="Override the global seed for sampling.")
@click.option("--labels", type=click.Path(exists=True), default=None,
              help="JSON {loop_id: bool} of precomputed drum/bass labels.")
@click.pass_obj
@handle_errors
def negatives(obj, strategy, ratio, neg_seed, labels):
    """Generate negative pairs (per split when splits exist)."""
    seed = obj["seed"] if neg_seed is None else neg_seed
    drum_bass = json.loads(Path(labels).read_text()) if labels else None
    config = SamplingConfig(strategy=strategy, seed=seed, neg_pos_ratio=ratio)
    manifest = pipeline.generate_negatives(obj["workspace"], config, drum_bass)
    click.echo(f"{len(manifest.negatives())} negative pairs")


@main.command()
@click.pass_obj
@handle_errors
def featurize(obj):
    """Precompute log-mel features for all loops and pairs."""
    manifest = pipeline.featurize(obj["workspace"])
    click.echo(f"featurized {len(manifest.loops)} loops, "
               f"{len(manifest.pairs)} pairs")


@main.command()
@click.option("--test-songs", default=0, show_default=True,
              help="Songs to hold out for ranking evaluation (1 pair each).")
@click.pass_obj
@handle_errors
def split(obj, test_songs):
    """Assign song-level train/val (4:1) and optional test splits."""
    paths = store.workspace_paths(obj["workspace"])
    manifest = _manifest(obj)
    store.split(manifest, seed=obj["seed"], test_songs=test_songs)
    manifest.save(paths["manifest"])
    counts = {}
    for entry in manifest.songs.values():
        counts[entry.split] = counts.get(entry.split, 0) + 1
    click.echo(" ".join(f"{k}={v}" for k, v in sorted(counts.items(), key=str)))


def _select_pairs(manifest, split_name, strategy):
    positives = manifest.positives(split_name)
    negs = [p for p in manifest.negatives(split_name)
            if strategy == "equal" or p.strategy == strategy]
    return positives + negs[: len(positives)] if strategy != "equal" else \
        positives + negs


@main.command()
@click.option("--model", "kind", type=click.Choice(["cnn", "snn"]), required=True)
@click.option("--neg", "strategy", type=click.Choice(STRATEGIES + ("equal",)),
              default="equal", show_default=True)
@click.option("--epochs", default=10, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--batch-size", default=128, show_default=True)
@click.pass_obj
@handle_errors
def train_cmd(obj, kind, strategy, epochs, lr, batch_size):
    """Train a compatibility model on the train/val splits."""
    workspace = obj["workspace"]
    paths = store.workspace_paths(workspace)
    manifest = _manifest(obj)
    train_pairs = _select_pairs(manifest, "train", strategy)
    val_pairs = _select_pairs(manifest, "val", strategy)
    features = pipeline.load_feature_store(workspace, manifest, kind,
                                           train_pairs + val_pairs)
    o = obj["overrides"]
    config = TrainConfig(lr=float(o.get("lr", lr)),
                         batch_size=int(o.get("batch_size", batch_size)),
                         epochs=int(o.get("epochs", epochs)),
                         seed=obj["seed"], negative_strategy=strategy,
                         margin=float(o.get("margin", 1.0)))
    ckpt = train(train_pairs, val_pairs, features, kind, config)
    paths[store.CHECKPOINT_DIR].mkdir(parents=True, exist_ok=True)
    out = paths[store.CHECKPOINT_DIR] / f"{kind}.ckpt"
    save_checkpoint(out, ckpt)
    log_path = paths[store.CHECKPOINT_DIR] / f"{kind}_training_log.csv"
    with open(log_path, "w") as fh:
        keys = sorted({k for rec in ckpt.history for k in rec})
        fh.write(",".join(keys) + "\n")
        for rec in ckpt.history:
            fh.write(",".join(str(rec.get(k, "")) for k in keys) + "\n")
    last = ckpt.history[-1] if ckpt.history else {}
    click.echo(f"saved {out} (final: {last})")


main.add_command(train_cmd, name="train")


def _scorer(obj, kind, checkpoint_path=None) -> LoopScorer:
    manifest = _manifest(obj)
    if kind == "amu":
        return LoopScorer("amu", manifest, obj["workspace"])
    paths = store.workspace_paths(obj["workspace"])
    path = Path(checkpoint_path) if checkpoint_path else \
        paths[store.CHECKPOINT_DIR] / f"{kind}.ckpt"
    if not path.exists():
        raise InvalidInput(f"no checkpoint at {path}; train first")
    return LoopScorer(kind, manifest, obj["workspace"], load_checkpoint(path))


@main.command()
@click.option("--task", type=click.Choice(["classify", "rank"]), required=True)
@click.option("--scorer", "kind", type=click.Choice(SCORER_KINDS), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--corpus-wide", is_flag=True,
              help="Draw ranking distractors corpus-wide, not test-set-only.")
@click.pass_obj
@handle_errors
def eval_cmd(obj, task, kind, checkpoint, corpus_wide):
    """Objective evaluation: balanced classification or candidate ranking."""
    manifest = _manifest(obj)
    scorer = _scorer(obj, kind, checkpoint)
    paths = store.workspace_paths(obj["workspace"])
    paths[store.REPORT_DIR].mkdir(parents=True, exist_ok=True)
    report = evaluate.EvalReport()
    if task == "classify":
        pairs = evaluate.build_classification_set(
            manifest.positives("val"), manifest.negatives("val"))
        accuracy, f1 = evaluate.classification_eval(
            scorer, pairs, threshold=scorer.classification_threshold())
        report.accuracy, report.f1 = accuracy, f1
        report.n_classification_pairs = len(pairs)
    else:
        test_positives = manifest.positives("test")
        if corpus_wide:
            pool = [l for l, rec in manifest.loops.items() if rec.strategy is None]
        else:
            pool = [l for l, rec in manifest.loops.items()
                    if rec.strategy is None and manifest.loop_split(l) == "test"]
        tasks = evaluate.build_ranking_tasks(test_positives, pool, seed=obj["seed"])
        ranking = evaluate.ranking_eval(scorer, tasks)
        report.avg_rank, report.top10 = ranking.avg_rank, ranking.top10
        report.top30, report.top50 = ranking.top30, ranking.top50
        report.n_ranking_tasks = ranking.n_ranking_tasks
        report.tie_count = ranking.tie_count
    report.reference = {f"{m}+{s}": v for (m, s), v
                        in evaluate.REFERENCE_RESULTS.items()}
    out = paths[store.REPORT_DIR] / f"{task}_{kind}.json"
    out.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    click.echo(evaluate.format_report(report, label=f"{task} / {kind}"))
    click.echo(f"report written to {out}")


main.add_command(eval_cmd, name="eval")


@main.command()
@click.option("--query", required=True, help="Query loop id.")
@click.option("--pool", default="all", show_default=True,
              help="Candidate pool: 'all', a split name, or a file of loop ids.")
@click.option("--scorer", "kind", type=click.Choice(SCORER_KINDS), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--top-n", default=10, show_default=True)
@click.pass_obj
@handle_errors
def rank(obj, query, pool, kind, checkpoint, top_n):
    """Rank candidate loops by compatibility with the query loop."""
    manifest = _manifest(obj)
    if query not in manifest.loops:
        raise InvalidInput(f"unknown loop {query!r}")
    if pool == "all":
        candidates = [l for l in sorted(manifest.loops) if l != query]
    elif pool in ("train", "val", "test"):
        candidates = [l for l in sorted(manifest.loops)
                      if l != query and manifest.loop_split(l) == pool]
    else:
        candidates = [l.strip() for l in Path(pool).read_text().splitlines()
                      if l.strip()]
    if not candidates:
        raise InsufficientData("empty candidate pool")
    scorer = _scorer(obj, kind, checkpoint)
    scored = sorted(((scorer(query, c), c) for c in candidates), reverse=True)
    for score, loop_id in scored[:top_n]:
        click.echo(f"{score:+.4f}  {loop_id}")


@main.command()
@click.option("--pair", "pair_spec", required=True,
              help="Two loop ids, comma separated.")
@click.option("-o", "--output", required=True, type=click.Path())
@click.pass_obj
@handle_errors
def mix(obj, pair_spec, output):
    """Render a loop pair as a single WAV for audition."""
    parts = [p.strip() for p in pair_spec.split(",")]
    if len(parts) != 2:
        raise InvalidInput("--pair expects exactly two loop ids: a,b")
    manifest = _manifest(obj)
    root = store.workspace_paths(obj["workspace"])["root"]
    clips = []
    for loop_id in parts:
        if loop_id not in manifest.loops:
            raise InvalidInput(f"unknown loop {loop_id!r}")
        clips.append(audio.read_wav(root / manifest.loops[loop_id].audio_path))
    audio.write_wav(output, models.mix_clips(*clips))
    click.echo(f"wrote {output}")


@main.command()
@click.pass_obj
@handle_errors
def validate(obj):
    """Check manifest referential integrity and audio file presence."""
    manifest = _manifest(obj)
    problems = manifest.validate(store.workspace_paths(obj["workspace"])["root"])
    for problem in problems:
        click.echo(problem, err=True)
    if problems:
        raise InvalidInput(f"{len(problems)} integrity problems")
    click.echo("manifest ok")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.pass_obj
@handle_errors
def serve(obj, host, port):
    """Serve the scoring API over HTTP."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(obj["workspace"]), host=host, port=port)


if __name__ == "__main__":
    main()
