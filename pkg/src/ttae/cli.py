"""Command-line entry point: dataset creation, training, generation,
evaluation, decoder-variant ablation, and augmentation experiments.

Every command resolves its options (command line over config file over
defaults), writes the resolved values to <out>/config.resolved, and puts all
outputs under --out. Re-running a command from its recorded config
reproduces the outputs. TTAE_SEED supplies a default seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import augment as A
from . import data as D
from . import metrics as ME
from . import model as M
from . import train as TR
from .tensor import LrSchedule


def _env_seed():
    raw = os.environ.get("TTAE_SEED")
    return int(raw) if raw else None


def _parse_bool(value):
    if isinstance(value, bool):
        return value
    return str(value).lower() in ("1", "true", "yes")


def _parse_int_list(value):
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v != ""]


# option tables: name -> (converter, default). Everything lands in the
# resolved config, so a run can be replayed from that file alone.
_COMMON_MODEL_OPTS = {
    "latent": (int, 0),  # 0 = pick from the window length
    "blocks": (int, 2),
    "heads": (int, 3),
    "head_size": (int, 64),
    "scale_mode": (str, "head"),
}

_SCHEMAS = {
    "make-data": {
        "kind": (str, None),
        "out": (str, None),
        "n": (int, 5000),
        "len": (int, 0),  # 0 = family default (24 simple, 128 otherwise)
        "dims": (int, 5),
        "local_weight": (float, 0.5),
        "csv": (str, ""),
        "header": (_parse_bool, False),
        "delimiter": (str, ","),
        "columns": (str, ""),
        "window": (int, 24),
        "seed": (int, None),
    },
    "train": {
        "data": (str, None),
        "out": (str, None),
        "epochs": (int, 200),
        "batch": (int, 64),
        "variant": (str, "full"),
        "recon_lr": (float, 0.005),
        "adv_lr": (float, 0.001),
        "end_lr": (float, 0.0001),
        "checkpoint_every": (int, 0),
        "seed": (int, None),
        **_COMMON_MODEL_OPTS,
    },
    "generate": {
        "weights": (str, None),
        "out": (str, None),
        "n": (int, None),
        "seed": (int, None),
    },
    "eval": {
        "real": (str, None),
        "synth": (str, None),
        "out": (str, None),
        "metrics": (str, "fid,disc,pred"),
        "pred_variant": (str, "last_step"),
        "seed": (int, None),
    },
    "ablate": {
        "data": (str, None),
        "out": (str, None),
        "epochs": (int, 200),
        "batch": (int, 64),
        "seeds": (str, "0,1,2"),
        "variants": (str, "full,deconv_only"),
        "seed": (int, None),
        **_COMMON_MODEL_OPTS,
    },
    "augment": {
        "train_data": (str, None),
        "train_labels": (str, None),
        "test_data": (str, None),
        "test_labels": (str, None),
        "out": (str, None),
        "method": (str, "none"),  # none | replicate | jitter | model
        "mode": (str, "balance"),  # balance | grow (model method)
        "amount": (int, 100),
        "weights": (str, ""),
        "sigma": (float, 0.03),
        "steps": (int, 1000),
        "seed": (int, None),
    },
}

_REQUIRED = {
    "make-data": ("kind", "out"),
    "train": ("data", "out"),
    "generate": ("weights", "out", "n", "seed"),
    "eval": ("real", "synth", "out"),
    "ablate": ("data", "out"),
    "augment": ("train_data", "train_labels", "test_data", "test_labels", "out"),
}


def _load_config_file(path):
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("["):
                continue
            if "=" not in line:
                raise ValueError(f"config file {path}: malformed line {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _resolve(command, cli_values, config_path):
    schema = _SCHEMAS[command]
    file_values = _load_config_file(config_path) if config_path else {}
    if file_values.get("command", command) != command:
        raise ValueError(
            f"config file was recorded for '{file_values['command']}', "
            f"not '{command}'"
        )
    resolved = {}
    for name, (convert, default) in schema.items():
        if cli_values.get(name) is not None:
            resolved[name] = cli_values[name]
        elif name in file_values:
            resolved[name] = convert(file_values[name])
        else:
            resolved[name] = default
    if resolved.get("seed") is None:
        env = _env_seed()
        resolved["seed"] = env if env is not None else 0
        if command == "generate" and env is None and cli_values.get("seed") is None:
            raise ValueError("generate requires --seed (or TTAE_SEED)")
    missing = [k for k in _REQUIRED[command] if resolved.get(k) in (None, "")]
    if missing:
        raise ValueError(f"missing required options: {', '.join(missing)}")
    return resolved


def _write_resolved(command, resolved, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"command={command}"]
    for key in sorted(resolved):
        lines.append(f"{key}={resolved[key]}")
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _model_config(resolved, t, c, variant=None, seed=None):
    latent = resolved["latent"] or M.default_latent_dim(t)
    return M.ModelConfig(
        time_steps=t, channels=c, latent_dim=latent,
        num_blocks=resolved["blocks"], num_heads=resolved["heads"],
        head_size=resolved["head_size"], scale_mode=resolved["scale_mode"],
        variant=variant or resolved.get("variant", "full"),
        seed=resolved["seed"] if seed is None else seed,
    )


def _train_config(resolved, seed=None):
    return TR.TrainConfig(
        epochs=resolved["epochs"], batch_size=resolved["batch"],
        recon_lr=LrSchedule(resolved.get("recon_lr", 0.005),
                            resolved.get("end_lr", 0.0001)),
        adv_lr=LrSchedule(resolved.get("adv_lr", 0.001),
                          resolved.get("end_lr", 0.0001)),
        seed=resolved["seed"] if seed is None else seed,
        checkpoint_every=resolved.get("checkpoint_every", 0),
    )


# --- commands -------------------------------------------------------------------


def _cmd_make_data(resolved):
    kind = resolved["kind"]
    out = resolved["out"]
    n, seed = resolved["n"], resolved["seed"]
    if kind == "sine-sim":
        length = resolved["len"] or 24
        batch = D.gen_sine_sim(D.SineSpec(n_samples=n, length=length,
                                          dims=resolved["dims"], seed=seed))
    elif kind == "sine-cpx":
        length = resolved["len"] or 128
        batch = D.gen_sine_cpx(D.SineSpec(n_samples=n, length=length,
                                          dims=resolved["dims"], components=3,
                                          seed=seed))
    elif kind == "mixture":
        length = resolved["len"] or 128
        batch = D.gen_local_global(D.MixtureSpec(
            n_samples=n, length=length,
            local_weight=resolved["local_weight"], seed=seed))
    elif kind == "csv":
        if not resolved["csv"]:
            raise ValueError("make-data csv requires --csv PATH")
        columns = _parse_int_list(resolved["columns"]) if resolved["columns"] else None
        series = D.load_csv(resolved["csv"], header=resolved["header"],
                            delimiter=resolved["delimiter"], columns=columns)
        windows = D.sliding_windows(series, resolved["window"])
        batch = D.minmax_transform(windows, D.minmax_fit(windows))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    D.save_dataset(os.path.join(out, "data.ttds"), batch)
    print(f"wrote {batch.shape[0]}x{batch.shape[1]}x{batch.shape[2]} dataset to {out}")
    return 0


def _cmd_train(resolved):
    out = resolved["out"]
    batch = D.load_dataset(resolved["data"])
    t, c = batch.shape[1], batch.shape[2]
    train_cfg = _train_config(resolved)
    if train_cfg.checkpoint_every:
        train_cfg.checkpoint_dir = out
    bundle, log = TR.fit(batch, train_cfg, model_config=_model_config(resolved, t, c))
    M.save_weights(bundle, os.path.join(out, "weights.ttae"))
    log.to_csv(os.path.join(out, "trainlog.csv"))
    print(f"trained {resolved['variant']} for {resolved['epochs']} epochs; "
          f"final recon loss {log.records[-1].recon_loss:.6f}")
    return 0


def _cmd_generate(resolved):
    bundle = M.load_weights(resolved["weights"])
    batch = M.generate(bundle, resolved["n"], resolved["seed"])
    D.save_dataset(os.path.join(resolved["out"], "synthetic.ttds"), batch)
    print(f"generated {resolved['n']} samples with seed {resolved['seed']}")
    return 0


def _evaluate(real, synth, metrics, pred_variant, seed):
    report = ME.EvalReport(n_real=real.shape[0], n_synth=synth.shape[0])
    if "fid" in metrics:
        report.fid = ME.fid_score(real, synth, seed=7)
        report.seeds["fid_embedder"] = 7
    if "disc" in metrics:
        report.discriminative = ME.discriminative_score(real, synth, seed=seed)
        report.seeds["discriminative"] = seed
    if "pred" in metrics:
        value = ME.predictive_score(real, synth, pred_variant, seed=seed)
        if pred_variant == "last_step":
            report.predictive_last_step = value
        else:
            report.predictive_timegan = value
        report.seeds["predictive"] = seed
    return report


def _cmd_eval(resolved):
    out = resolved["out"]
    real = D.load_dataset(resolved["real"])
    synth = D.load_dataset(resolved["synth"])
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(
            f"real {real.shape} and synth {synth.shape} windows do not match"
        )
    metrics = set(resolved["metrics"].split(","))
    unknown = metrics - {"fid", "disc", "pred"}
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    report = _evaluate(real, synth, metrics, resolved["pred_variant"],
                       resolved["seed"])
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")

    # one shared projection so the two point clouds are comparable
    coords = ME.pca_project_2d(np.concatenate([real, synth]))
    with open(os.path.join(out, "pca.csv"), "w", encoding="utf-8") as fh:
        fh.write("source,x,y\n")
        for i, (x, y) in enumerate(coords):
            source = "real" if i < real.shape[0] else "synth"
            fh.write(f"{source},{x:.8g},{y:.8g}\n")

    spec_real, _ = ME.magnitude_spectrum(real)
    spec_synth, _ = ME.magnitude_spectrum(synth)
    with open(os.path.join(out, "spectrum.csv"), "w", encoding="utf-8") as fh:
        fh.write("bin,real,synth\n")
        for i, (a, b) in enumerate(zip(spec_real, spec_synth)):
            fh.write(f"{i},{a:.8g},{b:.8g}\n")
    print(report.to_json())
    return 0


def _cmd_ablate(resolved):
    out = resolved["out"]
    batch = D.load_dataset(resolved["data"])
    t, c = batch.shape[1], batch.shape[2]
    seeds = _parse_int_list(resolved["seeds"])
    variants = [v.strip() for v in resolved["variants"].split(",") if v.strip()]
    for variant in variants:
        if variant not in M.VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")

    rows = []
    for variant in variants:
        for seed in seeds:
            run_dir = os.path.join(out, f"{variant}_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            bundle, log = TR.fit(
                batch, _train_config(resolved, seed=seed),
                model_config=_model_config(resolved, t, c, variant=variant,
                                           seed=seed))
            M.save_weights(bundle, os.path.join(run_dir, "weights.ttae"))
            log.to_csv(os.path.join(run_dir, "trainlog.csv"))
            synth = M.generate(bundle, batch.shape[0], seed=seed + 1000)
            D.save_dataset(os.path.join(run_dir, "synthetic.ttds"), synth)
            report = _evaluate(batch, synth, {"fid", "disc"}, "last_step", seed)
            rows.append((variant, seed, report.fid, report.discriminative))
            print(f"{variant} seed {seed}: fid={report.fid:.4f} "
                  f"disc={report.discriminative:.4f}")

    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,seed,fid,discriminative\n")
        for variant, seed, fid, disc in rows:
            fh.write(f"{variant},{seed},{fid:.8g},{disc:.8g}\n")
    print(f"{'variant':<14} {'fid':>10} {'disc':>10}")
    for variant in variants:
        fids = [r[2] for r in rows if r[0] == variant]
        discs = [r[3] for r in rows if r[0] == variant]
        print(f"{variant:<14} {np.mean(fids):>10.4f} {np.mean(discs):>10.4f}")
    return 0


def _read_labels(path):
    with open(path, "r", encoding="utf-8") as fh:
        return np.array([int(line.strip()) for line in fh if line.strip()],
                        dtype=np.int64)


def _cmd_augment(resolved):
    out = resolved["out"]
    seed = resolved["seed"]
    train = A.LabeledDataset(D.load_dataset(resolved["train_data"]),
                             _read_labels(resolved["train_labels"]), "train")
    test = A.LabeledDataset(D.load_dataset(resolved["test_data"]),
                            _read_labels(resolved["test_labels"]), "test")

    method = resolved["method"]
    if method == "none":
        augmented = train
    elif method in ("replicate", "jitter"):
        counts = np.bincount(train.labels)
        minority = int(np.argmin(counts))
        majority_count = int(counts.max())
        source = train.batch[train.labels == minority]
        extra = A.replicate(source, majority_count)[len(source):]
        if method == "jitter":
            extra = A.jitter(extra, sigma=resolved["sigma"], seed=seed)
        augmented = A.LabeledDataset(
            np.concatenate([train.batch, extra]),
            np.concatenate([train.labels,
                            np.full(len(extra), minority, dtype=np.int64)]),
            "train")
    elif method == "model":
        if not resolved["weights"]:
            raise ValueError("augment --method model requires --weights")
        if "=" in resolved["weights"]:
            bundles = {}
            for piece in resolved["weights"].split(","):
                label, path = piece.split("=", 1)
                bundles[int(label)] = M.load_weights(path)
            bundle = bundles
        else:
            bundle = M.load_weights(resolved["weights"])
        mode = "balance_minority" if resolved["mode"] == "balance" else "grow_percent"
        amount = resolved["amount"] if mode == "grow_percent" else None
        augmented = A.augment_with_model(train, bundle, mode, amount=amount,
                                         seed=seed)
    else:
        raise ValueError(f"unknown augmentation method {method!r}")

    metrics = A.classify_and_report(augmented, test, seed=seed,
                                    steps=resolved["steps"])
    row = A.metrics_json_row(metrics, method, seed)
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(row + "\n")
    print(row)
    return 0


_RUNNERS = {
    "make-data": _cmd_make_data,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "augment": _cmd_augment,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ttae",
        description="Time series generation toolkit: datasets, training, "
                    "evaluation, ablation and augmentation.")
    subs = parser.add_subparsers(dest="command", required=True)
    for command, schema in _SCHEMAS.items():
        sub = subs.add_parser(command)
        sub.add_argument("--config", default=None,
                         help="key=value file recorded by a previous run")
        for name, (convert, _default) in schema.items():
            flag = "--" + name.replace("_", "-")
            if command == "make-data" and name == "kind":
                sub.add_argument("kind", nargs="?", default=None,
                                 help="sine-sim | sine-cpx | mixture | csv")
            elif convert is _parse_bool:
                sub.add_argument(flag, default=None, type=_parse_bool)
            else:
                sub.add_argument(flag, default=None, type=convert)
    return parser


def main(argv):
    parser = _build_parser()
    args = parser.parse_args(argv)
    command = args.command
    cli_values = {k: v for k, v in vars(args).items()
                  if k not in ("command", "config")}
    try:
        resolved = _resolve(command, cli_values, args.config)
        _write_resolved(command, resolved, resolved["out"])
        return _RUNNERS[command](resolved)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
