"""Command-line pipeline: data generation, stage training, obfuscation,
evaluation, sweeps, audits, and a timing micro-benchmark.

Exit codes are a stable scripting contract: 0 success, 2 configuration
error, 3 missing or inconsistent prerequisite, 4 schema or file-format
error, 1 anything internal.

Heavy imports happen inside command handlers so that deterministic mode
can pin BLAS thread counts before numpy first loads.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time

from .errors import (ConfigError, DataFormatError, DependencyError,
                     ObfusionError, SchemaError)

MANIFEST_VERSION = 1
TRAIN_DATA = "train.clk"
TEST_DATA = "test.clk"
STAGE_CKPT = {"vae": "vae.ckpt", "contrastive": "contrastive.ckpt",
              "ldm": "ldm.ckpt"}
SNAPSHOT_DIR = "snapshots"

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


def pin_single_thread() -> None:
    """Force single-threaded BLAS reductions; must run before numpy loads."""
    for var in _THREAD_VARS:
        os.environ[var] = "1"


# ---------------------------------------------------------------------------
# shared plumbing


def _out(cfg, *names: str) -> str:
    return os.path.join(cfg.out_dir, *names)


def _embed_config(cfg) -> dict:
    """Resolved configuration as recorded in artifacts. The output
    directory is run plumbing, not part of the experiment, so reruns into
    different directories stay digest-identical."""
    resolved = cfg.to_dict()
    resolved.pop("out_dir")
    return resolved


def _write_json(path: str, payload: dict) -> str:
    from . import TOOL_VERSION

    payload = dict(payload)
    payload.setdefault("format_version", MANIFEST_VERSION)
    payload.setdefault("tool_version", TOOL_VERSION)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path!r} is not valid JSON: {exc}") from exc
    if int(payload.get("format_version", MANIFEST_VERSION)) > MANIFEST_VERSION:
        raise DataFormatError(f"{path!r} has format_version "
                              f"{payload['format_version']}, newer than "
                              f"supported {MANIFEST_VERSION}")
    return payload


def _loss_csv(path: str, losses: list[float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in enumerate(losses, start=1):
        writer.writerow([step, f"{loss:.8f}"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    return path


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise DependencyError(f"missing {path!r}; run {hint} first")
    return path


def _refuse_overwrite(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path!r} already exists; pass --force to "
                          f"overwrite")


def _load_train(cfg):
    from .data import load_dataset

    return load_dataset(_require(_out(cfg, TRAIN_DATA), "gen-data"))


def _schema_dicts(schema) -> list[dict]:
    return [{"name": a.name, "cardinality": a.cardinality, "role": a.role}
            for a in schema]


def write_manifest(cfg) -> str:
    """Record paths, digests, schedule, and schema for every artifact
    currently present in the output directory."""
    from .checkpoints import load_checkpoint
    from .data import load_dataset

    entries: dict[str, dict] = {}
    for stage, name in STAGE_CKPT.items():
        path = _out(cfg, name)
        if os.path.exists(path):
            ckpt = load_checkpoint(path)
            entries[stage] = {"path": name, "digest": ckpt.digest}
            if stage == "ldm":
                entries[stage]["schedule"] = ckpt.meta["schedule"]
                entries[stage]["latent_scale"] = ckpt.meta["latent_scale"]
    for fname in sorted(os.listdir(cfg.out_dir)):
        if fname.startswith("aux_") and fname.endswith(".ckpt"):
            ckpt = load_checkpoint(_out(cfg, fname))
            entries[f"aux:{ckpt.meta['attribute']}"] = {
                "path": fname, "digest": ckpt.digest}

    manifest: dict = {"checkpoints": entries}
    train_path = _out(cfg, TRAIN_DATA)
    if os.path.exists(train_path):
        manifest["dataset_schema"] = _schema_dicts(
            load_dataset(train_path).schema)
    return _write_json(_out(cfg, "manifest.json"), manifest)


def load_bundle(cfg):
    """Reassemble the frozen model stack from manifest.json, verifying
    that every checkpoint on disk still matches its recorded digest."""
    from .checkpoints import load_checkpoint
    from .contrastive import load_contrastive
    from .diffusion import load_ldm
    from .guidance import ModelBundle, load_aux
    from .vae import load_vae

    manifest = _read_json(_require(_out(cfg, "manifest.json"),
                                   "train vae/contrastive/ldm"))
    entries = manifest["checkpoints"]
    for stage in ("vae", "contrastive", "ldm"):
        if stage not in entries:
            raise DependencyError(f"manifest has no {stage!r} checkpoint; "
                                  f"run train {stage} first")
    digests: dict[str, str] = {}
    for name, entry in entries.items():
        path = _out(cfg, entry["path"])
        actual = load_checkpoint(_require(path, "train")).digest
        if actual != entry["digest"]:
            raise DependencyError(f"{path!r} digest {actual[:12]} does not "
                                  f"match manifest {entry['digest'][:12]}")
        digests[name] = entry["digest"]

    vae = load_vae(_out(cfg, entries["vae"]["path"]))
    phi = load_contrastive(_out(cfg, entries["contrastive"]["path"]))
    unet, schedule, meta = load_ldm(_out(cfg, entries["ldm"]["path"]))
    aux = {}
    for name, entry in entries.items():
        if name.startswith("aux:"):
            model, attribute = load_aux(_out(cfg, entry["path"]))
            aux[attribute] = model
    bundle = ModelBundle(vae=vae, phi=phi, unet=unet, schedule=schedule,
                         latent_scale=float(meta["latent_scale"]), aux=aux,
                         digests=digests)
    bundle.validate()
    return bundle


def _scaled_latents(cfg):
    """Working latents and conditioning vectors for ldm/aux training."""
    from .contrastive import embed_public, load_contrastive
    from .vae import load_vae

    vae = load_vae(_require(_out(cfg, STAGE_CKPT["vae"]), "train vae"))
    phi = load_contrastive(_require(_out(cfg, STAGE_CKPT["contrastive"]),
                                    "train contrastive"))
    train = _load_train(cfg)
    z_raw = vae.deterministic_latent(train.values)
    scale = float(1.0 / z_raw.std())
    cond = embed_public(phi, train.values)
    return (z_raw * scale).astype("float32"), cond, scale, train


def _offset_seed(section, offset: int):
    return dataclasses.replace(section, seed=section.seed + offset)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, args) -> int:
    from .data import (apply_stats, compute_channel_stats, generate_synthetic,
                       save_dataset, split)

    spec = dataclasses.replace(cfg.data, seed=cfg.data.seed + cfg.seed)
    full = generate_synthetic(spec)
    train, test = split(full, cfg.split.ratio, seed=cfg.split.seed + cfg.seed)
    stats = compute_channel_stats(train)
    train, test = apply_stats(train, stats), apply_stats(test, stats)

    os.makedirs(cfg.out_dir, exist_ok=True)
    d_train = save_dataset(_out(cfg, TRAIN_DATA), train)
    d_test = save_dataset(_out(cfg, TEST_DATA), test)
    _write_json(_out(cfg, "schema.json"), {
        "schema": _schema_dicts(train.schema),
        "n_train": len(train), "n_test": len(test),
        "digests": {"train": d_train, "test": d_test},
        "config": _embed_config(cfg),
    })
    print(f"wrote {len(train)} train / {len(test)} test segments "
          f"to {cfg.out_dir}")
    return 0


def _train_vae(cfg, args) -> None:
    from .plots import plot_loss_history
    from .vae import save_vae, vae_train

    result = vae_train(_load_train(cfg), _offset_seed(cfg.vae, cfg.seed))
    save_vae(_out(cfg, STAGE_CKPT["vae"]), result.model)
    _loss_csv(_out(cfg, "vae_loss.csv"), result.loss_history)
    plot_loss_history(result.loss_history, _out(cfg, "vae_loss.png"),
                      label="VAE loss")


def _train_contrastive(cfg, args) -> None:
    from .contrastive import save_contrastive, train_contrastive
    from .plots import plot_loss_history

    snap_dir = _out(cfg, SNAPSHOT_DIR)
    os.makedirs(snap_dir, exist_ok=True)
    result = train_contrastive(_load_train(cfg),
                               _offset_seed(cfg.contrastive, cfg.seed),
                               snapshot_dir=snap_dir)
    save_contrastive(_out(cfg, STAGE_CKPT["contrastive"]), result.model)
    _loss_csv(_out(cfg, "contrastive_loss.csv"), result.loss_history)
    plot_loss_history(result.loss_history, _out(cfg, "contrastive_loss.png"),
                      label="InfoNCE loss")


def _train_ldm(cfg, args) -> None:
    from .diffusion import ldm_train, make_linear_schedule, save_ldm
    from .plots import plot_loss_history

    z0, cond, scale, _ = _scaled_latents(cfg)
    result = ldm_train(z0, cond, make_linear_schedule(),
                       _offset_seed(cfg.ldm, cfg.seed))
    save_ldm(_out(cfg, STAGE_CKPT["ldm"]), result.model, result.schedule,
             extra_meta={"latent_scale": scale})
    _loss_csv(_out(cfg, "ldm_loss.csv"), result.loss_history)
    plot_loss_history(result.loss_history, _out(cfg, "ldm_loss.png"),
                      label="denoiser loss")


def _train_aux(cfg, args) -> None:
    from .guidance import save_aux, train_aux_privacy
    from .plots import plot_loss_history

    z0, cond, _, train = _scaled_latents(cfg)
    attributes = train.private_attributes
    if not attributes:
        raise SchemaError("training data declares no private attributes")
    for k, attribute in enumerate(attributes):
        path = _out(cfg, f"aux_{attribute}.ckpt")
        _refuse_overwrite(path, args.force)
        result = train_aux_privacy(z0, cond, train.labels[attribute],
                                   _offset_seed(cfg.aux, cfg.seed + k))
        save_aux(path, result.model, attribute)
        _loss_csv(_out(cfg, f"aux_{attribute}_loss.csv"),
                  result.loss_history)
        plot_loss_history(result.loss_history,
                          _out(cfg, f"aux_{attribute}_loss.png"),
                          label=f"aux loss ({attribute})")
        print(f"aux {attribute!r}: holdout accuracy "
              f"{result.holdout_accuracy:.3f}")


_TRAINERS = {"vae": _train_vae, "contrastive": _train_contrastive,
             "ldm": _train_ldm, "aux": _train_aux}
_PREREQS = {"vae": [], "contrastive": [], "ldm": ["vae", "contrastive"],
            "aux": ["vae", "contrastive"]}


def cmd_train(cfg, args) -> int:
    stage = args.stage
    for prereq in _PREREQS[stage]:
        _require(_out(cfg, STAGE_CKPT[prereq]), f"train {prereq}")
    if stage in STAGE_CKPT:
        _refuse_overwrite(_out(cfg, STAGE_CKPT[stage]), args.force)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _TRAINERS[stage](cfg, args)
    write_manifest(cfg)
    print(f"trained {stage}; manifest updated")
    return 0


def _parse_ws(pairs: list[str], schema_names: set[str]) -> list:
    from .guidance import Negation

    negations = []
    for pair in pairs:
        name, sep, weight = pair.partition("=")
        if not sep or not name:
            raise ConfigError(f"--w-s expects name=weight, got {pair!r}")
        if name not in schema_names:
            raise SchemaError(f"attribute {name!r} is not in the dataset "
                              f"schema")
        try:
            negations.append(Negation(name, float(weight)))
        except ValueError as exc:
            raise ConfigError(f"bad --w-s weight in {pair!r}") from exc
    return negations


def cmd_obfuscate(cfg, args) -> int:
    from .data import load_dataset, save_dataset
    from .guidance import GuidanceSpec, obfuscate_batch

    bundle = load_bundle(cfg)
    in_path = args.input or _out(cfg, TEST_DATA)
    dataset = load_dataset(_require(in_path, "gen-data"))
    schema_names = {a.name for a in dataset.schema}
    negations = _parse_ws(args.w_s, schema_names)
    for neg in negations:
        if neg.attribute not in bundle.aux:
            raise DependencyError(f"no aux checkpoint for {neg.attribute!r}; "
                                  f"run train aux first")
    spec = GuidanceSpec(w_u=args.w_u, negations=negations)
    seed = args.seed if args.seed is not None else \
        cfg.obfuscate.seed + cfg.seed

    started = time.perf_counter()
    obf, sidecar = obfuscate_batch(dataset, bundle, spec, seed=seed,
                                   batch_size=args.batch_size)
    elapsed = time.perf_counter() - started

    out_path = args.output or _out(cfg, "obfuscated.clk")
    digest = save_dataset(out_path, obf)
    sidecar.update({
        "flags": {"w_u": args.w_u, "w_s": list(args.w_s), "seed": seed,
                  "batch_size": args.batch_size},
        "input": os.path.basename(in_path),
        "output_digest": digest,
        "wall_clock_per_segment": 0.0 if cfg.deterministic
        else elapsed / max(len(obf), 1),
    })
    _write_json(out_path + ".json", sidecar)
    print(f"obfuscated {len(obf)} segments -> {out_path}")
    return 0


def _frozen_classifiers(cfg, train, attributes):
    from .audit import train_eval_classifier

    classifiers = {}
    for k, attribute in enumerate(attributes):
        classifiers[attribute] = train_eval_classifier(
            train, attribute, _offset_seed(cfg.classifier, cfg.seed + k))
    return classifiers


def cmd_evaluate(cfg, args) -> int:
    from .audit import evaluate
    from .data import load_dataset
    from .plots import plot_bars

    train = _load_train(cfg)
    in_path = args.input or _out(cfg, "obfuscated.clk")
    dataset = load_dataset(_require(in_path, "obfuscate"))

    guidance, seed, digests, wall = None, None, None, None
    sidecar_path = in_path + ".json"
    if os.path.exists(sidecar_path):
        sidecar = _read_json(sidecar_path)
        guidance = sidecar.get("guidance")
        seed = sidecar.get("seed")
        digests = sidecar.get("checkpoint_digests")
        wall = sidecar.get("wall_clock_per_segment")
    if cfg.deterministic:
        wall = 0.0

    attributes = [a.name for a in dataset.schema]
    classifiers = _frozen_classifiers(cfg, train, attributes)
    report = evaluate(dataset, classifiers, guidance=guidance, seed=seed,
                      checkpoint_digests=digests,
                      wall_clock_per_segment=wall)
    out_path = _out(cfg, "report.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    plot_bars({name: m["accuracy"] for name, m in report.metrics.items()},
              _out(cfg, "report.png"), ylabel="accuracy",
              title="frozen-classifier accuracy")
    for name, m in report.metrics.items():
        line = f"{name} ({m['role']}): acc {m['accuracy']:.3f} " \
               f"f1 {m['macro_f1']:.3f}"
        if "privacy_loss" in m:
            line += f" privacy_loss {m['privacy_loss']:.3f}"
        print(line)
    print(f"report -> {out_path}")
    return 0


def cmd_sweep(cfg, args) -> int:
    from .audit import sweep_rows_to_csv, tradeoff_sweep
    from .data import load_dataset
    from .plots import plot_tradeoff

    bundle = load_bundle(cfg)
    train = _load_train(cfg)
    in_path = args.input or _out(cfg, TEST_DATA)
    dataset = load_dataset(_require(in_path, "gen-data"))
    if cfg.sweep.subset:
        import numpy as np

        dataset = dataset.subset(np.arange(min(cfg.sweep.subset,
                                               len(dataset))))
    public = dataset.public_attribute
    private = args.private or dataset.private_attributes[0]
    classifiers = _frozen_classifiers(cfg, train, [public, private])

    rows = tradeoff_sweep(list(cfg.sweep.w_u_grid), list(cfg.sweep.w_s_grid),
                          bundle, dataset, classifiers, public, private,
                          seed=cfg.sweep.seed + cfg.seed,
                          batch_size=cfg.obfuscate.batch_size)
    csv_path = _out(cfg, "sweep.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(sweep_rows_to_csv(rows))
    plot_tradeoff(rows, _out(cfg, "tradeoff.png"))
    _write_json(_out(cfg, "sweep.json"), {
        "checkpoint_digests": dict(bundle.digests),
        "n_rows": len(rows),
        "public_attribute": public, "private_attribute": private,
        "config": _embed_config(cfg),
    })
    print(f"{len(rows)} sweep rows -> {csv_path}")
    return 0


def cmd_audit(cfg, args) -> int:
    from .audit import disentanglement_audit, mi_rows_to_csv
    from .plots import plot_mi_curves

    snap_dir = _out(cfg, SNAPSHOT_DIR)
    if not os.path.isdir(snap_dir):
        raise DependencyError(f"missing {snap_dir!r}; run train contrastive "
                              f"first")
    paths = sorted(os.path.join(snap_dir, f) for f in os.listdir(snap_dir)
                   if f.endswith(".clk"))
    rows = disentanglement_audit(paths, attributes=args.attributes or None,
                                 mine_cfg=_offset_seed(cfg.mine, cfg.seed))
    csv_path = _out(cfg, "mi_curves.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(mi_rows_to_csv(rows))
    plot_mi_curves(rows, _out(cfg, "mi_curves.png"))
    _write_json(_out(cfg, "audit.json"), {
        "n_snapshots": len(paths), "n_rows": len(rows),
        "config": _embed_config(cfg),
    })
    print(f"{len(rows)} MI rows -> {csv_path}")
    return 0


def _bench_once(bundle, x, schedule, negation):
    """Per-component wall-clock for one batch, in seconds."""
    import numpy as np

    from .contrastive import embed_public
    from .diffusion import ddim_sample
    from .guidance import ccfg_eps, privacy_grad, request_noise

    times = {}
    started = time.perf_counter()
    z_u = embed_public(bundle.phi, x)
    times["aux-u"] = time.perf_counter() - started

    z_t = np.stack([request_noise(0, i, bundle.vae.latent_dim)
                    for i in range(x.shape[0])])
    started = time.perf_counter()
    z0 = ddim_sample(schedule, z_t,
                     lambda z, t: ccfg_eps(bundle.unet, z.astype(np.float32),
                                           t, z_u, 3.0))
    times["unet"] = time.perf_counter() - started

    times["aux-s"] = 0.0
    if negation is not None:
        eta, labels = negation
        z32 = z0.astype(np.float32)
        steps = [(int(t), bundle.unet.forward(z32, np.full(x.shape[0], t),
                                              z_u)[0])
                 for t in list(schedule.ddim_steps)[::-1]]
        started = time.perf_counter()
        for t, eps in steps:
            privacy_grad(eta, z32, t, z_u, labels, eps, schedule)
        times["aux-s"] = time.perf_counter() - started

    started = time.perf_counter()
    bundle.vae.decode((z0 / bundle.latent_scale).astype(np.float32))
    times["decoder"] = time.perf_counter() - started
    return times


def cmd_bench(cfg, args) -> int:
    import numpy as np

    from .data import load_dataset
    from .diffusion import make_linear_schedule
    from .guidance import GuidanceSpec, Negation, obfuscate_batch
    from .plots import plot_bars

    bundle = load_bundle(cfg)
    dataset = load_dataset(_require(args.input or _out(cfg, TEST_DATA),
                                    "gen-data"))
    n = min(args.segments, len(dataset))
    sub = dataset.subset(np.arange(n))
    schedule = bundle.schedule
    if args.ddim_steps:
        schedule = make_linear_schedule(schedule.T,
                                        float(schedule.betas[0]),
                                        float(schedule.betas[-1]),
                                        n_ddim=args.ddim_steps)
    negation = None
    spec = GuidanceSpec(w_u=3.0)
    if bundle.aux:
        attribute = sorted(bundle.aux)[0]
        negation = (bundle.aux[attribute], sub.labels[attribute])
        spec = GuidanceSpec(w_u=3.0, negations=[Negation(attribute, 0.03)])

    bench_bundle = dataclasses.replace(bundle, schedule=schedule)
    per_component: dict[str, list[float]] = {}
    for _ in range(args.batches):
        times = _bench_once(bench_bundle, sub.values.astype(np.float32),
                            schedule, negation)
        started = time.perf_counter()
        obfuscate_batch(sub, bench_bundle, spec, seed=0, batch_size=n)
        times["total"] = time.perf_counter() - started
        for key, val in times.items():
            per_component.setdefault(key, []).append(val * 1000.0 / n)

    rows = []
    for key in ("unet", "decoder", "aux-u", "aux-s", "total"):
        vals = per_component[key]
        rows.append({"component": key,
                     "mean_ms_per_segment": f"{np.mean(vals):.4f}",
                     "std_ms_per_segment": f"{np.std(vals):.4f}"})
    csv_path = _out(cfg, "bench.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    plot_bars({r["component"]: float(r["mean_ms_per_segment"])
               for r in rows}, _out(cfg, "bench.png"),
              ylabel="ms per segment",
              title=f"{schedule.n_ddim} DDIM steps, batch {n}")
    for row in rows:
        print(f"{row['component']:>8}: {row['mean_ms_per_segment']} ms "
              f"± {row['std_ms_per_segment']}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obfusion",
        description="Latent-diffusion obfuscation of labeled time-series.")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="global seed offset for every stage")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded math, zeroed wall-clock fields")
    parser.add_argument("--out-dir", default=None,
                        help="artifact directory (default: config out_dir)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="write synthetic train/test datasets")

    p_train = sub.add_parser("train", help="train one pipeline stage")
    p_train.add_argument("stage", choices=sorted(_TRAINERS))
    p_train.add_argument("--force", action="store_true",
                         help="overwrite an existing checkpoint")

    p_obf = sub.add_parser("obfuscate", help="regenerate a dataset under "
                                             "guidance")
    p_obf.add_argument("--input", help="dataset to obfuscate "
                                       "(default: test split)")
    p_obf.add_argument("--output", help="output dataset path")
    p_obf.add_argument("--w-u", type=float, default=3.0,
                       help="public-attribute guidance weight")
    p_obf.add_argument("--w-s", action="append", default=[],
                       metavar="NAME=WEIGHT",
                       help="negated guidance weight per private attribute "
                            "(repeatable)")
    p_obf.add_argument("--seed", type=int, default=None,
                       help="per-request noise seed")
    p_obf.add_argument("--batch-size", type=int, default=128)

    p_eval = sub.add_parser("evaluate", help="score frozen classifiers on a "
                                             "dataset")
    p_eval.add_argument("--input", help="dataset to score "
                                        "(default: obfuscated output)")

    p_sweep = sub.add_parser("sweep", help="grid sweep over guidance weights")
    p_sweep.add_argument("--input", help="evaluation dataset "
                                         "(default: test split)")
    p_sweep.add_argument("--private", help="private attribute to track "
                                           "(default: first in schema)")

    p_audit = sub.add_parser("audit", help="MI between embedding snapshots "
                                           "and attributes")
    p_audit.add_argument("--attributes", nargs="*", default=None)

    p_bench = sub.add_parser("bench", help="per-component timing")
    p_bench.add_argument("--input", help="dataset supplying segments")
    p_bench.add_argument("--batches", type=int, default=3)
    p_bench.add_argument("--segments", type=int, default=16)
    p_bench.add_argument("--ddim-steps", type=int, default=None)

    return parser


_COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train,
             "obfuscate": cmd_obfuscate, "evaluate": cmd_evaluate,
             "sweep": cmd_sweep, "audit": cmd_audit, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        pin_single_thread()

    from .config import RunConfig, load_config

    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out_dir is not None:
            cfg.out_dir = args.out_dir
        if args.deterministic:
            cfg.deterministic = True
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SchemaError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ObfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
