"""Command-line pipeline: prepare, train, sample, evaluate, lodo.

Every command works inside a work directory::

    prepared/schema.json       schema with fitted statistics
    prepared/data/*.npy        encoded rows (X, y, z, d)
    checkpoints/{score,label,sensitive}/
    checkpoints/loss_history.csv
    checkpoints/resume/        optimizer moments, raw parameters, rng state

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import guidance, meta, nn, sde
from .config import PipelineConfig, parse_value, substream_seed
from .errors import ConfigError, FairDiffError, LoadError, SchemaError, UsageError
from .estimator import FairDiffusionGenerator, pipeline_fold
from .fairness import DownstreamClassifier, FairnessReport, evaluate_target, leave_one_domain_out
from .tabular import (
    EncodedDataset, TabularEncoder, TabularSchema, decode, encode, load_csv, split_domains,
)

logger = logging.getLogger("fairdiff")

MODEL_DIRS = {"score": "score", "label": "label", "sensitive": "sensitive"}


# work directory layout


def _paths(cfg):
    root = cfg["paths.workdir"]
    return {
        "root": root,
        "prepared": os.path.join(root, "prepared"),
        "schema": os.path.join(root, "prepared", "schema.json"),
        "data": os.path.join(root, "prepared", "data"),
        "checkpoints": os.path.join(root, "checkpoints"),
        "history": os.path.join(root, "checkpoints", "loss_history.csv"),
        "resume": os.path.join(root, "checkpoints", "resume"),
    }


def _require_file(path, what):
    if not path:
        raise ConfigError(f"no {what} given")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_prepared(cfg):
    p = _paths(cfg)
    if not os.path.isfile(p["schema"]):
        raise ConfigError(f"no prepared data in {p['root']}; run 'fairdiff prepare' first")
    return TabularSchema.load(p["schema"]), EncodedDataset.load(p["data"])


def _domain_codes(schema, names):
    cats = schema.domain.categories
    codes = []
    for name in names:
        if name not in cats:
            raise UsageError(f"unknown domain {name!r}; available domains: {', '.join(cats)}")
        codes.append(cats.index(name))
    return codes


def _source_rows(schema, ds, exclude):
    drop = _domain_codes(schema, exclude)
    return np.flatnonzero(~np.isin(ds.d, drop))


# prepare


def cmd_prepare(cfg, args):
    schema = TabularSchema.load(_require_file(cfg["paths.schema"], "schema file"))
    rows, dropped = load_csv(_require_file(cfg["paths.data"], "data file"), schema)
    if len(rows) == 0:
        raise LoadError("no rows left after dropping missing values")
    # vocabularies come from every row, statistics from the source rows only
    vocab = TabularEncoder(schema).fit(rows).schema_
    exclude = cfg["train.exclude_domains"]
    d_col = vocab.domain.name
    src = rows[~rows[d_col].isin(exclude)]
    _domain_codes(vocab, exclude)
    fitted = TabularEncoder(vocab).fit(src).schema_
    ds = encode(rows, fitted)

    p = _paths(cfg)
    os.makedirs(p["prepared"], exist_ok=True)
    fitted.save(p["schema"])
    ds.save(p["data"])

    counts = np.bincount(ds.d, minlength=len(fitted.domain.categories))
    lines = [f"{'domain':<24}{'rows':>8}"]
    for name, n in zip(fitted.domain.categories, counts):
        if n:
            tag = "  (excluded from statistics)" if name in exclude else ""
            lines.append(f"{name:<24}{int(n):>8}{tag}")
    lines.append(f"{'total':<24}{len(ds):>8}")
    with open(os.path.join(p["prepared"], "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"dropped {dropped} rows with missing values")
    print(f"{int(np.count_nonzero(counts))} domains, encoded width {fitted.encoded_width}, "
          f"schema {fitted.fingerprint()}")
    print("\n".join(lines))
    return 0


# train


def _config_identity(cfg, n_features):
    keys = [k for k in cfg.values if k.split(".")[0] in ("schedule", "network", "meta")]
    keys += ["seed", "train.batch_size", "train.optimizer", "train.exact", "train.ema_decay",
             "train.exclude_domains"]
    ident = {k: cfg[k] for k in sorted(keys)}
    ident["n_features"] = n_features
    return ident


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "model", "L_in", "L_out"])
        for it, model, l_in, l_out in history:
            w.writerow([it, model, repr(float(l_in)), repr(float(l_out))])


def _read_history(path, upto):
    if not os.path.isfile(path):
        return []
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            it = int(row["iteration"])
            if it <= upto:
                out.append((it, row["model"], float(row["L_in"]), float(row["L_out"])))
    return out


def _save_checkpoints(p, state, manifest_extra):
    nets = state.sampling_params()
    for m in meta.MODELS:
        nn.save_params(nets[m], os.path.join(p["checkpoints"], MODEL_DIRS[m]), m,
                       iteration=state.iteration, **manifest_extra[m])


def _save_resume(p, state, identity):
    root = p["resume"]
    for m in meta.MODELS:
        nn.save_params(state.params[m], os.path.join(root, "params", m), m)
        if state.ema is not None:
            nn.save_params(state.ema[m], os.path.join(root, "ema", m), m)
        opt = state.optimizers[m].state_dict()
        for key in ("m", "v"):
            for i, a in enumerate(opt.pop(key) or []):
                np.save(os.path.join(root, f"{m}.{key}{i}.npy"), a)
        with open(os.path.join(root, f"{m}.optimizer.json"), "w") as fh:
            json.dump(opt, fh, indent=2, sort_keys=True)
    info = {
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "has_ema": state.ema is not None,
        "config": identity,
    }
    with open(os.path.join(root, "state.json"), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)


def _load_resume(p, identity):
    root = p["resume"]
    path = os.path.join(root, "state.json")
    if not os.path.isfile(path):
        return None
    with open(path) as fh:
        info = json.load(fh)
    if info["config"] != identity:
        raise ConfigError("--resume: the saved run used a different configuration")
    params, optimizers, ema = {}, {}, {} if info["has_ema"] else None
    for m in meta.MODELS:
        params[m], _ = nn.load_params(os.path.join(root, "params", m))
        if ema is not None:
            ema[m], _ = nn.load_params(os.path.join(root, "ema", m))
        with open(os.path.join(root, f"{m}.optimizer.json")) as fh:
            opt = json.load(fh)
        n = len(params[m].arrays())
        for key in ("m", "v"):
            files = [os.path.join(root, f"{m}.{key}{i}.npy") for i in range(n)]
            opt[key] = [np.load(f) for f in files] if all(map(os.path.isfile, files)) else None
        optimizers[m] = nn.OptimizerState.from_state_dict(opt)
    rng = np.random.default_rng()
    rng.bit_generator.state = info["rng"]
    return meta.TrainState(params, optimizers, int(info["iteration"]), rng, ema)


def _train(cfg, resume=False):
    schema, ds = _load_prepared(cfg)
    p = _paths(cfg)
    rows = _source_rows(schema, ds, cfg["train.exclude_domains"])
    if len(rows) == 0:
        raise UsageError("every domain is excluded from training")
    src = ds.subset(rows)
    n_domains = len(np.unique(src.d))
    if n_domains < 2:
        logger.warning("only one source domain; falling back to plain training")
    train_seed = substream_seed(cfg["seed"], "train")
    gen = FairDiffusionGenerator(**cfg.generator_params(), random_state=train_seed)
    identity = _config_identity(cfg, src.X.shape[1])

    state = _load_resume(p, identity) if resume else None
    history = _read_history(p["history"], state.iteration) if state is not None else []
    if state is not None:
        logger.info("resuming from iteration %d", state.iteration)

    n_labels = len(schema.label.categories)
    prior = (np.bincount(src.y, minlength=n_labels) / len(src)).tolist()
    common = {
        "schema_fingerprint": schema.fingerprint(),
        "schedule": gen.schedule().to_dict(),
        "seed": cfg["seed"],
        "score_scaling": gen.score_scaling,
    }
    extra = {
        "score": dict(common),
        "label": dict(common, label_prior=prior, n_train=len(src)),
        "sensitive": dict(common),
    }
    os.makedirs(p["resume"], exist_ok=True)

    def on_checkpoint(st, hist):
        _save_checkpoints(p, st, extra)
        _save_resume(p, st, identity)
        _write_history(p["history"], hist)

    if state is None:
        state = gen.init_state(src.X.shape[1], n_labels, len(schema.sensitive.categories))
    gen.fit(src.X, src.y, src.z, src.d if n_domains >= 2 else None, state=state,
            history=history, checkpoint_every=cfg["train.checkpoint_every"] or None,
            on_checkpoint=on_checkpoint)
    on_checkpoint(gen.state_, gen.loss_history_)
    return gen


def cmd_train(cfg, args):
    gen = _train(cfg, resume=args.resume)
    p = _paths(cfg)
    last = {m: (l_in, l_out) for it, m, l_in, l_out in gen.loss_history_
            if it == gen.state_.iteration}
    print(f"trained to iteration {gen.state_.iteration}; checkpoints in {p['checkpoints']}")
    for m, (l_in, l_out) in last.items():
        print(f"  {m:<10} L_in={l_in:.5f}  L_out={l_out:.5f}")
    return 0


# sample


def _load_networks(cfg, schema):
    p = _paths(cfg)
    nets, manifests, hashes = {}, {}, {}
    for m in meta.MODELS:
        d = os.path.join(p["checkpoints"], MODEL_DIRS[m])
        if not os.path.isfile(os.path.join(d, "manifest")):
            raise ConfigError(f"missing checkpoint {d}; run 'fairdiff train' first")
        nets[m], manifests[m] = nn.load_params(d)
        if manifests[m].get("schema_fingerprint") != schema.fingerprint():
            raise SchemaError(
                f"checkpoint {d} was trained with schema {manifests[m].get('schema_fingerprint')}, "
                f"prepared data has {schema.fingerprint()}"
            )
        hashes[m] = nn.checkpoint_hash(d)
    return nets, manifests, hashes


def cmd_sample(cfg, args):
    schema, _ = _load_prepared(cfg)
    nets, manifests, hashes = _load_networks(cfg, schema)
    man = manifests["label"]
    sched = sde.NoiseSchedule(**man["schedule"])
    n = args.num_samples if args.num_samples is not None else cfg["sample.num_samples"]
    n = int(man["n_train"]) if n is None else int(n)
    if n < 1:
        raise UsageError("--num-samples must be >= 1")
    steps = args.steps if args.steps is not None else sched.n_steps
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    weights = guidance.GuidanceWeights(cfg["guidance.lambda_y"], cfg["guidance.lambda_z"])
    seed = substream_seed(cfg["seed"], "sample")
    label_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
    request = guidance.LabelRequest.from_policy(
        n, cfg["sample.label_policy"], man["label_prior"], label_rng)
    X = guidance.generate(
        nets["score"], nets["label"], nets["sensitive"], sched, request, weights, seed,
        n_steps=steps, clip=cfg["guidance.clip"], scaling=man.get("score_scaling", "none"),
        n_jobs=cfg["threads"],
    )
    out = args.out or os.path.join(_paths(cfg)["root"], "synthetic.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    decode(X, request.labels, schema).to_csv(out, index=False, float_format="%.10g")
    sidecar = {
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "num_samples": n,
        "lambda_y": weights.lambda_y,
        "lambda_z": weights.lambda_z,
        "steps": steps,
        "label_policy": cfg["sample.label_policy"],
        "seed": cfg["seed"],
        "sample_stream_seed": seed,
        "clip": cfg["guidance.clip"],
        "schema_fingerprint": schema.fingerprint(),
        "checkpoints": hashes,
    }
    with open(out + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {n} rows to {out}")
    return 0


# evaluate


def cmd_evaluate(cfg, args):
    schema, ds = _load_prepared(cfg)
    syn_path = _require_file(args.syn, "synthetic data file")
    rows, _ = load_csv(syn_path, schema, roles=("feature", "label"))
    syn = encode(rows, schema)
    if args.all_domains:
        codes = [int(k) for k in np.unique(ds.d)]
    elif args.target_domain:
        codes = _domain_codes(schema, args.target_domain)
    else:
        raise UsageError("give --target-domain NAME or --all-domains")
    clf = DownstreamClassifier(**cfg.downstream_params(),
                               random_state=substream_seed(cfg["seed"], "eval"))
    clf.fit(syn.X, syn.y)
    report = FairnessReport()
    names = schema.domain.categories
    for k in codes:
        target = ds.subset(np.flatnonzero(ds.d == k))
        if len(target) == 0:
            raise UsageError(f"domain {names[k]!r} has no rows; available domains: "
                             f"{', '.join(names[int(j)] for j in np.unique(ds.d))}")
        row = evaluate_target(clf, target, names[k])
        report.add(names[k], row["acc"], row["r_dp"], row["r_eop"])
    prefix = args.report or os.path.join(_paths(cfg)["root"], "report")
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    report.to_csv(prefix + ".csv")
    text = report.to_text()
    with open(prefix + ".txt", "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


# lodo


def _read_candidates(path):
    try:
        with open(_require_file(path, "candidates file")) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, list) or not all(isinstance(c, dict) for c in data):
        raise ConfigError(f"{path}: expected a JSON list of objects")
    return data


def cmd_lodo(cfg, args):
    schema, ds = _load_prepared(cfg)
    candidates = _read_candidates(args.candidates)
    cand_cfgs = []
    for i, overrides in enumerate(candidates):
        c = PipelineConfig(dict(cfg.values))
        try:
            for k, v in overrides.items():
                c.set(k, v)
        except ConfigError as exc:
            raise ConfigError(f"candidate {i}: {exc}") from None
        cand_cfgs.append(c)

    rows = _source_rows(schema, ds, cfg["train.exclude_domains"])
    src = ds.subset(rows)
    part = split_domains(src)
    threads = cfg["threads"]
    lodo_seed = substream_seed(cfg["seed"], "lodo")
    fold_configs = []
    for c in cand_cfgs:
        fc = c.generator_params()
        fc.update(random_state=lodo_seed, n_jobs=1 if threads > 1 else threads,
                  downstream=c.downstream_params())
        if c["lodo.n_samples"] is not None:
            fc["n_samples"] = c["lodo.n_samples"]
        fold_configs.append(fc)
    budget = args.budget if args.budget is not None else cfg["lodo.budget"]
    result = leave_one_domain_out(src, part, fold_configs, pipeline_fold, budget=budget,
                                  n_jobs=threads)

    names = [schema.domain.categories[k] for k in result.domains]
    root = _paths(cfg)["root"]
    out = args.out or os.path.join(root, "lodo")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out + ".csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate", "heldout_domain", "acc"])
        for ci in range(len(candidates)):
            for di, name in enumerate(names):
                w.writerow([ci, name, f"{result.fold_scores[ci, di]:.6f}"])
    width = max(10, *(len(n) + 2 for n in names))
    lines = ["candidate" + "".join(f"{n:>{width}}" for n in names) + f"{'mean':>{width}}"]
    for ci, mean in enumerate(result.mean_scores):
        cells = "".join(f"{a:>{width}.4f}" for a in result.fold_scores[ci])
        lines.append(f"{ci:<9}{cells}{mean:>{width}.4f}")
    lines.append(f"winner: candidate {result.selected} "
                 f"(mean accuracy {result.mean_scores[result.selected]:.4f}) "
                 f"{json.dumps(candidates[result.selected], sort_keys=True)}")
    text = "\n".join(lines) + "\n"
    with open(out + ".txt", "w") as fh:
        fh.write(text)
    with open(out + "_winner.json", "w") as fh:
        json.dump({"index": result.selected, "overrides": candidates[result.selected]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(text, end="")
    if args.retrain:
        _train(cand_cfgs[result.selected])
        print(f"retrained candidate {result.selected} on all source domains")
    return 0


# argument parsing


def _common(parser):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--workdir", help="work directory (paths.workdir)")
    parser.add_argument("--seed", type=int, help="base seed (seed)")
    parser.add_argument("--threads", type=int, help="worker threads for sampling chains and folds")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; may repeat")
    parser.add_argument("--exclude-domain", action="append", metavar="NAME",
                        help="keep a domain out of fitting and training; may repeat")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="fairdiff", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="encode a CSV and cache it")
    _common(p)
    p.add_argument("--data", help="input CSV (paths.data)")
    p.add_argument("--schema", help="schema JSON (paths.schema)")

    p = sub.add_parser("train", help="meta-train the score network and classifiers")
    _common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    p = sub.add_parser("sample", help="generate a synthetic CSV")
    _common(p)
    p.add_argument("--num-samples", type=int)
    p.add_argument("--lambda-y", type=float)
    p.add_argument("--lambda-z", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--label-policy", help="prior, uniform or fixed:K")
    p.add_argument("--out", help="output CSV (default WORKDIR/synthetic.csv)")

    p = sub.add_parser("evaluate", help="downstream accuracy and fairness on real domains")
    _common(p)
    p.add_argument("--syn", required=True, help="synthetic CSV")
    p.add_argument("--target-domain", action="append", metavar="NAME")
    p.add_argument("--all-domains", action="store_true")
    p.add_argument("--report", help="output prefix for .csv and .txt (default WORKDIR/report)")

    p = sub.add_parser("lodo", help="leave-one-domain-out model selection")
    _common(p)
    p.add_argument("--candidates", required=True, help="JSON list of config overrides")
    p.add_argument("--budget", type=int, help="cap on training iterations per fold")
    p.add_argument("--out", help="output prefix (default WORKDIR/lodo)")
    p.add_argument("--retrain", action="store_true", help="retrain the winner on all domains")
    return parser


def make_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), parse_value(value))
    cfg.override("paths.workdir", args.workdir)
    cfg.override("seed", args.seed)
    cfg.override("threads", args.threads)
    cfg.override("train.exclude_domains", args.exclude_domain)
    for flag, key in (("data", "paths.data"), ("schema", "paths.schema"),
                      ("iterations", "train.iterations"), ("lambda_y", "guidance.lambda_y"),
                      ("lambda_z", "guidance.lambda_z"), ("label_policy", "sample.label_policy")):
        cfg.override(key, getattr(args, flag, None))
    return cfg


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "lodo": cmd_lodo,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        return COMMANDS[args.command](cfg, args)
    except FairDiffError as exc:
        print(f"fairdiff {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
