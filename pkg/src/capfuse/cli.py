"""``capfuse`` command line: synth, train, eval, rank, gradcheck."""

from __future__ import annotations

import csv
import functools
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import dataset as dsmod
from . import evaluation as ev
from . import features as ft
from . import gradcheck as gc
from .model import (
    DEFAULT_LAYERS,
    LOSS_KINDS,
    LossConfig,
    TrainConfig,
    forward,
    init_model,
    load_model,
    save_model,
    train,
)

FIC_FILE = "fic.txt"
REGION_FILE = "regions.txt"
REL_FILE = "relevance.txt"
SPLITS_FILE = "splits.csv"
PAIRS_FILE = "pairs.csv"


def _log(msg: str) -> None:
    click.echo(msg, err=True)


def _fail_cleanly(fn):
    """Turn data/IO errors into a one-line diagnostic and exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, KeyError, OSError, ArithmeticError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
            raise click.ClickException(str(msg)) from exc

    return wrapper


def _int_list(ctx, param, value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return list(value)
    try:
        items = [int(t) for t in str(value).split(",") if t.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None
    if not items or min(items) < 1:
        raise click.BadParameter("values must be positive integers")
    return items


def _read_config(path) -> dict[str, str]:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.BadParameter(f"{path}:{lineno}: expected key=value", param_hint="--config")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="key=value file of defaults for the subcommand; flags win.")
@click.pass_context
def main(ctx, config_path):
    """Late-fusion siamese retrieval: synthesize, train, evaluate, rank."""
    if config_path and ctx.invoked_subcommand:
        values = _read_config(config_path)
        cmd = main.get_command(ctx, ctx.invoked_subcommand)
        known = {p.name for p in cmd.params}
        unknown = sorted(set(values) - known)
        if unknown:
            raise click.BadParameter(
                f"unknown key(s) for {ctx.invoked_subcommand}: {', '.join(unknown)}", param_hint="--config"
            )
        ctx.default_map = {ctx.invoked_subcommand: values}


# --------------------------------------------------------------------------- synth

@main.command()
@click.option("--n-queries", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--refs-per-query", type=click.IntRange(min=1), default=180, show_default=True)
@click.option("--pool-size", type=click.IntRange(min=1), default=None,
              help="Reference images shared by all queries [default: 1835 - n_queries, at least refs-per-query].")
@click.option("--dim-a", type=click.IntRange(min=1), default=512, show_default=True)
@click.option("--dim-b", type=click.IntRange(min=1), default=512, show_default=True)
@click.option("--clusters", type=click.IntRange(min=1), default=dsmod.SynthConfig.n_latent_clusters, show_default=True)
@click.option("--noise", type=click.FloatRange(min=0), default=dsmod.SynthConfig.noise_sigma, show_default=True)
@click.option("--period-a", type=click.IntRange(min=0), default=dsmod.SynthConfig.period_a, show_default=True,
              help="Clusters c and c+P share a whole-image centroid; 0 disables.")
@click.option("--period-b", type=click.IntRange(min=0), default=dsmod.SynthConfig.period_b, show_default=True,
              help="Clusters c and c+P share a region centroid; 0 disables.")
@click.option("--regions-per-image", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--distractors", type=click.IntRange(min=0), default=3, show_default=True)
@click.option("--ring/--no-ring", default=True, show_default=True, help="Grade 2 for ring-adjacent clusters.")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_fail_cleanly
def synth(n_queries, refs_per_query, pool_size, dim_a, dim_b, clusters, noise, period_a, period_b,
          regions_per_image, distractors, ring, seed, out):
    """Write a planted-similarity corpus (features, regions, relevance)."""
    if pool_size is None:
        pool_size = max(1835 - n_queries, refs_per_query)
    cfg = dsmod.SynthConfig(
        n_queries=n_queries, refs_per_query=refs_per_query, dim_a=dim_a, dim_b=dim_b,
        n_latent_clusters=clusters, noise_sigma=noise, seed=seed, pool_size=pool_size,
        n_regions=regions_per_image, n_distractor_regions=distractors, ring_grading=ring,
        period_a=period_a, period_b=period_b,
    )
    fic, regions, ds = dsmod.synth_generate(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ft.write_feature_table(fic, out / FIC_FILE)
    ft.write_region_features(regions.values(), out / REGION_FILE, dim_b)
    dsmod.write_relevance(ds, out / REL_FILE)
    _log(f"wrote {len(fic)} images, {ds.n_judgments()} judgments over {len(ds.queries)} queries to {out}")


# --------------------------------------------------------------------------- shared loading

def _load_sources(fic_path, regions_path, rel_path, views):
    ds = dsmod.load_relevance(rel_path)
    fic = regions = None
    if views in ("both", "fic"):
        if not fic_path:
            raise click.UsageError("--fic is required for this view selection")
        fic = ft.load_feature_table(fic_path)
    if views in ("both", "regions"):
        if not regions_path:
            raise click.UsageError("--regions is required for this view selection")
        regions = ft.load_region_features(regions_path)
    return fic, regions, ds


def _inputs(fic, regions, ds, k, views) -> dict[str, np.ndarray]:
    ids, X = ft.build_inputs(fic, regions, ds.image_ids(), k, views)
    return dict(zip(ids, X))


def _fold_seeds(seed: int, fold: int) -> tuple[int, int]:
    state = np.random.SeedSequence([seed, fold]).generate_state(2)
    return int(state[0]), int(state[1])


data_options = [
    click.option("--fic", type=click.Path(exists=True, dir_okay=False), help="Whole-image feature file."),
    click.option("--regions", type=click.Path(exists=True, dir_okay=False), help="Region feature file."),
    click.option("--rel", type=click.Path(exists=True, dir_okay=False), required=True, help="Relevance file."),
]


def _with(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


# --------------------------------------------------------------------------- train

@main.command("train")
@_with(data_options)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--k", "top_k", type=click.IntRange(min=1), default=ft.DEFAULT_TOP_K, show_default=True,
              help="Regions mean-pooled per image.")
@click.option("--views", type=click.Choice(ft.VIEWS), default="both", show_default=True)
@click.option("--layers", callback=_int_list, default=",".join(map(str, DEFAULT_LAYERS)), show_default=True)
@click.option("--epochs", type=click.IntRange(min=0), default=30, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=0.01, show_default=True)
@click.option("--momentum", type=click.FloatRange(0, 1, max_open=True), default=0.9, show_default=True)
@click.option("--margin", type=click.FloatRange(min=0, min_open=True), default=1.0, show_default=True)
@click.option("--batch", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--loss", "loss_kind", type=click.Choice(LOSS_KINDS), default="modified", show_default=True)
@click.option("--scale-grades", is_flag=True, help="Divide grades by 3 before the loss.")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_fail_cleanly
def train_cmd(fic, regions, rel, folds, top_k, views, layers, epochs, lr, momentum, margin,
              batch, loss_kind, scale_grades, seed, out):
    """Train one siamese model per fold and save checkpoints + loss histories."""
    if folds < 2:
        raise click.BadParameter("need at least 2 folds", param_hint="--folds")
    fic_t, regions_t, ds = _load_sources(fic, regions, rel, views)
    inputs = _inputs(fic_t, regions_t, ds, top_k, views)
    input_dim = next(iter(inputs.values())).shape[0]
    splits = dsmod.kfold_split(ds.queries, folds, seed)
    loss_cfg = LossConfig(margin=margin, batch_size=batch, loss_kind=loss_kind)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / SPLITS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "role", "query_id"])
        for s in splits:
            w.writerows([s.fold_index, "train", q] for q in s.train_queries)
            w.writerows([s.fold_index, "eval", q] for q in s.eval_queries)

    pair_rows = []
    for s in splits:
        pairs = dsmod.generate_pairs(ds, s.train_queries)
        if loss_kind == "standard":
            pairs = [p._replace(y=int(p.y > 0)) for p in pairs]
        elif scale_grades:
            pairs = [p._replace(y=p.y / 3) for p in pairs]
        init_seed, train_seed = _fold_seeds(seed, s.fold_index)
        model = init_model(input_dim, layers, init_seed)
        model.meta = {"fusion": views, "k": str(top_k), "loss": loss_kind}
        started = time.perf_counter()
        model, hist = train(
            model, pairs, inputs, loss_cfg,
            TrainConfig(epochs=epochs, learning_rate=lr, momentum=momentum, seed=train_seed),
        )
        save_model(model, out / f"fold_{s.fold_index}.model")
        with open(out / f"fold_{s.fold_index}_history.csv", "w") as fh:
            fh.write("epoch,mean_loss\n")
            fh.writelines(f"{e},{v!r}\n" for e, v in enumerate(hist.epoch_loss, start=1))
        pair_rows.append((s.fold_index, len(s.train_queries), len(s.eval_queries), len(pairs)))
        last = f"{hist.epoch_loss[-1]:.6f}" if hist.epoch_loss else "n/a"
        _log(f"fold {s.fold_index}: {len(pairs)} pairs, final loss {last}, "
             f"{time.perf_counter() - started:.1f}s")
    with open(out / PAIRS_FILE, "w") as fh:
        fh.write("fold,train_queries,eval_queries,train_pairs\n")
        fh.writelines(",".join(map(str, r)) + "\n" for r in pair_rows)


# --------------------------------------------------------------------------- eval

def _read_splits(run_dir: Path) -> dict[int, list[str]]:
    path = run_dir / SPLITS_FILE
    if not path.exists():
        raise click.ClickException(f"missing {path}; run 'train' first")
    evals: dict[int, list[str]] = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            fold = int(row["fold"])
            evals.setdefault(fold, [])
            if row["role"] == "eval":
                evals[fold].append(row["query_id"])
    return dict(sorted(evals.items()))


def _read_pairs(run_dir: Path) -> dict[int, str]:
    path = run_dir / PAIRS_FILE
    if not path.exists():
        return {}
    with open(path) as fh:
        return {int(r["fold"]): r["train_pairs"] for r in csv.DictReader(fh)}


@main.command("eval")
@_with(data_options)
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Output directory of 'train'.")
@click.option("--ks", callback=_int_list, default="5,10,20,30", show_default=True)
@click.option("--baseline", is_flag=True, help="Also score raw fused-feature distances.")
@click.option("--gain", type=click.Choice(ev.GAINS), default="exp", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Report directory [default: --run].")
@_fail_cleanly
def eval_cmd(fic, regions, rel, run_dir, ks, baseline, gain, out):
    """Score every fold's model on its held-out queries; write CSV reports."""
    run_dir = Path(run_dir)
    out = Path(out) if out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    splits = _read_splits(run_dir)
    pair_counts = _read_pairs(run_dir)
    models = {}
    for fold in splits:
        path = run_dir / f"fold_{fold}.model"
        if not path.exists():
            raise click.ClickException(f"missing checkpoint {path}")
        models[fold] = load_model(path)
    views = {m.meta.get("fusion", "both") for m in models.values()}
    ks_regions = {m.meta.get("k", str(ft.DEFAULT_TOP_K)) for m in models.values()}
    if len(views) != 1 or len(ks_regions) != 1:
        raise click.ClickException("fold checkpoints disagree on fusion settings")
    views, top_k = views.pop(), int(ks_regions.pop())
    fic_t, regions_t, ds = _load_sources(fic, regions, rel, views)
    inputs = _inputs(fic_t, regions_t, ds, top_k, views)

    trained, raw = [], []
    for fold, eval_q in splits.items():
        m = models[fold]
        if m.input_dim != next(iter(inputs.values())).shape[0]:
            raise click.ClickException(f"fold {fold}: checkpoint input_dim {m.input_dim} does not match features")
        meta = {"fold": str(fold), "train_pairs": pair_counts.get(fold, "?"), "embedding": "model"}
        rep = ev.evaluate(functools.partial(forward, m), inputs, ds, eval_q, ks, gain)
        rep.meta = meta
        ev.write_report(rep, out / f"fold_{fold}.csv")
        trained.append(rep)
        if baseline:
            base = ev.evaluate(ev.identity_embedder, inputs, ds, eval_q, ks, gain)
            base.meta = {**meta, "embedding": "raw"}
            ev.write_report(base, out / f"baseline_fold_{fold}.csv")
            raw.append(base)
    agg = ev.combine_reports(trained)
    agg.meta["embedding"] = "model"
    ev.write_report(agg, out / "aggregate.csv")
    summary = "  ".join(f"nDCG@{k}={v:.4f}" for k, v in zip(ks, agg.mean_ndcg))
    _log(f"model    {summary}")
    if baseline:
        base_agg = ev.combine_reports(raw)
        base_agg.meta["embedding"] = "raw"
        ev.write_report(base_agg, out / "baseline_aggregate.csv")
        summary = "  ".join(f"nDCG@{k}={v:.4f}" for k, v in zip(ks, base_agg.mean_ndcg))
        _log(f"baseline {summary}")


# --------------------------------------------------------------------------- rank

@main.command()
@_with(data_options)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              help="Checkpoint to embed with (not needed with --raw).")
@click.option("--query", required=True)
@click.option("--raw", is_flag=True, help="Rank by raw fused features instead of embeddings.")
@click.option("--k", "top_k", type=click.IntRange(min=1), default=None,
              help="Regions pooled per image [default: checkpoint's, else 5].")
@click.option("--views", type=click.Choice(ft.VIEWS), default=None,
              help="Feature sources [default: checkpoint's, else both].")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write rows here instead of stdout.")
@_fail_cleanly
def rank(fic, regions, rel, model_path, query, raw, top_k, views, out):
    """Rank one query's judged references by distance."""
    m = None
    if not raw:
        if not model_path:
            raise click.UsageError("--model is required unless --raw is given")
        m = load_model(model_path)
    meta = m.meta if m is not None else {}
    views = views or meta.get("fusion", "both")
    top_k = top_k or int(meta.get("k", ft.DEFAULT_TOP_K))
    fic_t, regions_t, ds = _load_sources(fic, regions, rel, views)
    if query not in ds.judgments:
        raise click.ClickException(f"unknown query id {query!r}")
    ids = [query, *ds.references(query)]
    _, X = ft.build_inputs(fic_t, regions_t, ids, top_k, views)
    vecs = X if m is None else forward(m, X)
    ranked = ev.rank_references(vecs[0], list(zip(ids[1:], vecs[1:])), query)
    lines = ["ref_id\tdistance\tgrade"]
    lines += [f"{r}\t{d!r}\t{ds.grade(query, r)}" for r, d in zip(ranked.ref_ids, ranked.distances)]
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


# --------------------------------------------------------------------------- gradcheck

@main.command()
@click.option("--trials", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--corrupt", is_flag=True, hidden=True, help="Check a deliberately wrong gradient.")
def gradcheck(trials, seed, corrupt):
    """Finite-difference check of the analytic gradients on random small models."""
    grad_fn = gc.corrupted_batch_grad if corrupt else gc.batch_grad
    results = gc.run_trials(trials, seed, grad_fn=grad_fn)
    for r in results:
        click.echo(f"trial {r.trial}: {r.loss_kind:8s} params={r.n_params:3d} pairs={r.n_pairs} "
                   f"skipped={r.skipped} max_rel_error={r.max_rel_error:.3e}")
    worst = max(r.max_rel_error for r in results)
    ok = worst < gc.TOLERANCE
    click.echo(f"max relative error {worst:.3e} (tolerance {gc.TOLERANCE:.0e}): {'PASS' if ok else 'FAIL'}")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
