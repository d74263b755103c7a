"""Command-line pipeline: synth, train, caption, saliency, eval.

All commands share one flat key=value configuration with documented
defaults; unknown keys are hard errors. Every command that produces an
output directory echoes the resolved configuration into it, and outputs
are pure functions of (config, input files, seed): re-running a command
overwrites its outputs with identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import evaluation as ev
from . import saliency as sal
from . import seq2seq as s2s
from . import synthworld as sw
from . import training as tr
from .numerics import ContractError, DimensionError

CONFIG_ENV_VAR = "CAPSAL_CONFIG"

# key: (default, help)
CONFIG_SPEC: dict[str, tuple] = {
    "seed": (11, "master seed; sub-seeds for init/shuffling derive from it"),
    "g": (4, "grid size (g x g cells per frame)"),
    "m": (8, "frames per scene (1 = still image mode)"),
    "k_min": (1, "minimum objects per scene"),
    "k_max": (3, "maximum objects per scene"),
    "sigma": (0.05, "feature noise level"),
    "d_feat": (24, "descriptor dimensionality"),
    "code_scale": (4.0, "object code amplitude relative to background"),
    "pooling": ("mean", "grid-to-item pooling: mean or sum"),
    "n_train": (2000, "training scenes"),
    "n_val": (200, "validation scenes"),
    "n_test": (200, "test scenes"),
    "store_train_grids": (False, "keep pre-pool grids in the train file"),
    "d_red": (16, "descriptor reduction size"),
    "d_emb": (16, "word embedding size"),
    "hidden": (64, "LSTM hidden size"),
    "attention": (False, "use the soft-attention decoder variant"),
    "d_attn": (32, "attention scoring size"),
    "learning_rate": (0.0005, "Adam initial learning rate"),
    "beta1": (0.9, "Adam beta1"),
    "beta2": (0.999, "Adam beta2"),
    "eps": (1e-8, "Adam epsilon"),
    "batch_size": (16, "examples per optimizer step"),
    "epochs": (250, "training epochs"),
    "clip_norm": (5.0, "global gradient-norm clip"),
    "max_len": (16, "greedy decoding length cap"),
    "chunk_size": (0, "probe batch cap; 0 runs all probes in one batch"),
}


class CliError(RuntimeError):
    """User-facing error: printed as one line, exit status 1."""


def _coerce(key: str, raw: str):
    default = CONFIG_SPEC[key][0]
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise CliError(f"config key {key!r} expects a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise CliError(f"config key {key!r} expects {type(default).__name__}, "
                       f"got {raw!r}") from None
    return raw.strip()


def load_config(path: str | None, overrides=()) -> dict:
    """Resolve defaults <- optional file <- key=value overrides."""
    config = {key: default for key, (default, _) in CONFIG_SPEC.items()}

    def apply(key: str, value: str, origin: str):
        key = key.strip()
        if key not in CONFIG_SPEC:
            raise CliError(f"unknown config key {key!r} ({origin})")
        config[key] = _coerce(key, value)

    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        try:
            with open(path) as fh:
                for line_no, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise CliError(
                            f"malformed config line {line_no} in {path}"
                        )
                    key, value = line.split("=", 1)
                    apply(key, value, f"{path}:{line_no}")
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply(key, value, "--set")
    return config


def echo_config(config: dict, outdir: str) -> None:
    lines = [f"{key}={config[key]}" for key in sorted(config)]
    with open(os.path.join(outdir, "config.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _synth_config(config: dict) -> sw.SynthConfig:
    return sw.SynthConfig(
        g=config["g"], m=config["m"],
        k_min=config["k_min"], k_max=config["k_max"],
        sigma=config["sigma"], d_feat=config["d_feat"],
        code_scale=config["code_scale"], pooling=config["pooling"],
    )


def _hyperparams(config: dict) -> s2s.Hyperparams:
    return s2s.Hyperparams(
        d_feat=config["d_feat"], d_red=config["d_red"],
        d_emb=config["d_emb"], hidden=config["hidden"],
        use_attention=config["attention"], d_attn=config["d_attn"],
    )


def _chunk(config: dict) -> int | None:
    return config["chunk_size"] or None


def cmd_synth(config: dict, outdir: str) -> int:
    os.makedirs(outdir, exist_ok=True)
    train, val, test = sw.generate_dataset(
        config["seed"], _synth_config(config),
        n_train=config["n_train"], n_val=config["n_val"],
        n_test=config["n_test"],
    )
    sw.save_dataset(os.path.join(outdir, "train.txt"), train,
                    store_grids=config["store_train_grids"])
    sw.save_dataset(os.path.join(outdir, "val.txt"), val, store_grids=True)
    sw.save_dataset(os.path.join(outdir, "test.txt"), test, store_grids=True)
    echo_config(config, outdir)
    print(f"wrote {len(train)}/{len(val)}/{len(test)} scenes to {outdir}")
    return 0


def _load_records(path: str):
    if not os.path.exists(path):
        raise CliError(f"missing dataset file {path}")
    return sw.load_dataset(path)


def cmd_train(config: dict, datadir: str, outdir: str) -> int:
    os.makedirs(outdir, exist_ok=True)
    train_recs = _load_records(os.path.join(datadir, "train.txt"))
    val_recs = _load_records(os.path.join(datadir, "val.txt"))
    vocab = sw.vocabulary_from_scenes(train_recs)
    params = s2s.init_params(vocab, _hyperparams(config), seed=config["seed"] + 1)
    train_ex = [(seq, sw.framed_caption(scene)) for scene, seq in train_recs]
    val_ex = [(seq, sw.framed_caption(scene)) for scene, seq in val_recs]
    tconf = tr.TrainConfig(
        learning_rate=config["learning_rate"], beta1=config["beta1"],
        beta2=config["beta2"], eps=config["eps"],
        batch_size=config["batch_size"], epochs=config["epochs"],
        clip_norm=config["clip_norm"], seed=config["seed"] + 2,
    )
    log_lines: list[str] = []
    result = tr.train(train_ex, val_ex, params, tconf, log=log_lines.append)
    with open(os.path.join(outdir, "train_log.tsv"), "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    s2s.save_checkpoint(result.params, os.path.join(outdir, "checkpoint.json"))
    echo_config(config, outdir)
    status = "diverged" if result.diverged else "ok"
    print(f"{status}: best val loss {result.best_val_loss:.6f} "
          f"at epoch {result.best_epoch}; checkpoint in {outdir}")
    return 0 if not result.diverged else 1


def _load_record(path: str, index: int):
    records = _load_records(path)
    if not 0 <= index < len(records):
        raise CliError(f"index {index} out of range for {path} "
                       f"({len(records)} records)")
    return records[index]


def cmd_caption(checkpoint: str, data: str, index: int, config: dict) -> int:
    params = s2s.load_checkpoint(checkpoint)
    scene, seq = _load_record(data, index)
    words = s2s.greedy_caption(params, seq, max_len=config["max_len"])
    print(" ".join(words))
    return 0


def _parse_phrases(spec: str, n_words: int) -> list[tuple[str, tuple[int, ...]]]:
    groups = []
    for i, chunk in enumerate(spec.split(";")):
        chunk = chunk.strip()
        if not chunk:
            continue
        label, _, indices = chunk.rpartition(":")
        label = label or f"phrase{i}"
        try:
            parsed = tuple(int(x) for x in indices.split(","))
        except ValueError:
            raise CliError(f"malformed phrase group {chunk!r}") from None
        for idx in parsed:
            if not 0 <= idx < n_words:
                raise CliError(f"phrase index {idx} out of range (query has "
                               f"{n_words} words)")
        groups.append((label, parsed))
    if not groups:
        raise CliError("no phrase groups parsed")
    return groups


def cmd_saliency(checkpoint: str, data: str, index: int, config: dict,
                 outdir: str, query: str | None, use_predicted: bool,
                 spatial: bool, phrases: str | None,
                 representativeness: bool) -> int:
    if (query is None) == (not use_predicted):
        raise CliError("give exactly one of --query or --use-predicted")
    params = s2s.load_checkpoint(checkpoint)
    scene, seq = _load_record(data, index)
    os.makedirs(outdir, exist_ok=True)

    meta: dict = {"input": {"data": os.path.basename(data), "index": index}}

    if params.attention is not None:
        # the explicit attention weights are the saliency for this variant
        if spatial:
            raise CliError("the attention variant exports its alpha weights "
                           "directly; spatial probing applies to the base model")
        if use_predicted:
            tokens = s2s.greedy_caption(params, seq, max_len=config["max_len"])
            if not tokens:
                raise CliError("model predicted an empty caption")
        else:
            tokens = query.split()
        alphas, eos_alpha = sal.attention_alpha_map(params, seq, tokens)
        ids, unk_positions = params.vocab.encode(tokens)
        doc = {
            "mode": "attention-alpha",
            "words": tokens,
            "word_ids": ids,
            "unk_positions": unk_positions,
            "temporal": {"alpha": alphas.tolist()},
            "eos": {"alpha": eos_alpha.tolist()},
        }
        doc.update(meta)
        with open(os.path.join(outdir, "saliency.json"), "w") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        echo_config(config, outdir)
        print(f"wrote attention alpha map for {len(tokens)} words to {outdir}")
        return 0

    if use_predicted:
        saliency = sal.saliency_for_predicted(
            params, seq, max_len=config["max_len"],
            include_spatial=spatial, chunk_size=_chunk(config))
        tokens = saliency.words
    else:
        tokens = query.split()
        saliency = sal.batch_probe(params, seq, tokens,
                                   include_spatial=spatial,
                                   chunk_size=_chunk(config))

    if phrases is not None:
        phrase_out = []
        for label, indices in _parse_phrases(phrases, len(tokens)):
            raw, scaled = sal.phrase_saliency(saliency, indices)
            phrase_out.append({
                "label": label,
                "token_indices": list(indices),
                "raw": raw.tolist(),
                "scaled": scaled.tolist(),
            })
        meta["phrases"] = phrase_out
    if representativeness:
        meta["representativeness"] = sal.representativeness(
            params, seq, tokens).tolist()

    doc = sal.saliency_to_dict(saliency, meta)
    with open(os.path.join(outdir, "saliency.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    graymaps = sal.export_graymaps(saliency, outdir)
    echo_config(config, outdir)
    print(f"wrote saliency for {len(tokens)} words "
          f"({saliency.probe_sequences} probes, {len(graymaps)} graymaps) "
          f"to {outdir}")
    return 0


def cmd_eval(checkpoint: str, data: str, config: dict, outdir: str) -> int:
    params = s2s.load_checkpoint(checkpoint)
    records = _load_records(data)
    os.makedirs(outdir, exist_ok=True)
    report = ev.evaluate_model(params, records, chunk_size=_chunk(config),
                               max_len=config["max_len"])
    text = ev.render_report(report)
    with open(os.path.join(outdir, "report.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(ev.report_to_dict(report), fh, sort_keys=True,
                  separators=(",", ":"))
        fh.write("\n")
    echo_config(config, outdir)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsal",
        description="caption-guided saliency pipeline on synthetic scenes",
    )
    parser.add_argument("--config", help="key=value config file "
                        f"(default: ${CONFIG_ENV_VAR})")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override one config key")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate dataset files")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a captioning model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("caption", help="greedy-caption one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("saliency", help="extract saliency maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--query", help="arbitrary query sentence")
    p.add_argument("--use-predicted", action="store_true",
                   help="probe the model's own greedy caption")
    p.add_argument("--spatial", action="store_true",
                   help="probe per-cell spatial saliency (needs grids)")
    p.add_argument("--phrases", help="groups like 'label:0,1,2;other:3,4'")
    p.add_argument("--representativeness", action="store_true",
                   help="also export full-distribution KL per descriptor")

    p = sub.add_parser("eval", help="pointing game / attention correctness")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.set)
        if args.command == "synth":
            return cmd_synth(config, args.out)
        if args.command == "train":
            return cmd_train(config, args.data, args.out)
        if args.command == "caption":
            return cmd_caption(args.checkpoint, args.data, args.index, config)
        if args.command == "saliency":
            return cmd_saliency(args.checkpoint, args.data, args.index, config,
                                args.out, args.query, args.use_predicted,
                                args.spatial, args.phrases,
                                args.representativeness)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data, config, args.out)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, ContractError, DimensionError, tr.NanGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
