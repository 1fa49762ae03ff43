"""``hrt train|eval|bench|dump-attention``.

Exit codes: 0 success, 1 config or input error, 2 divergence, 3 gated-check failure.
"""
import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import bench as B
from . import engine as E
from .attention import record_attention
from .config import HrtConfig, from_dict
from .errors import ConfigError, DivergenceError, HrtError
from .kernels import BACKEND
from .model import HrtModel, load_checkpoint, save_checkpoint
from .tasks import BYTE_OFFSET, CHAR_VOCAB, TaskSpec, load_corpus, make_batch
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GATED = 0, 1, 2, 3


@dataclass
class BenchConfig:
    n_list: list = field(default_factory=lambda: list(B.DEFAULT_N_LIST))
    batch: int = 1
    d1: int = 16
    heads: int = 4
    blocks: int = 2
    vocab_size: int = 16
    meta: bool = True
    ablation: bool = False
    nes: bool = False
    nes_n: int = 512


SECTIONS = {"model": HrtConfig, "task": TaskSpec, "training": TrainConfig, "bench": BenchConfig}


@dataclass
class RunConfig:
    model: HrtConfig
    task: TaskSpec
    training: TrainConfig
    bench: BenchConfig
    raw: dict

    def to_dict(self):
        import dataclasses
        return {k: dataclasses.asdict(getattr(self, k)) for k in SECTIONS}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, overrides):
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"override key {key!r} must be <section>.<key> with section in {sorted(SECTIONS)}")
        raw.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
    return raw


def load_run_config(path, overrides=(), seed=None):
    if not path:
        raw = {}
    else:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    raw = apply_overrides(json.loads(json.dumps(raw)), overrides)
    if seed is not None:
        raw.setdefault("model", {})["seed"] = int(seed)
    parts = {name: from_dict(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    return RunConfig(raw=raw, **parts)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_json(out, command, rc, inputs=(), extra=None):
    """Provenance: resolved config, seed, input and output hashes."""
    outputs = sorted(f for f in os.listdir(out) if f != "run.json" and os.path.isfile(os.path.join(out, f)))
    doc = {
        "command": command,
        "config": rc.to_dict(),
        "seed": rc.model.seed,
        "version": __version__,
        "kernel_backend": BACKEND,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": {f: _sha256(os.path.join(out, f)) for f in outputs},
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(out, "run.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_config(rc):
    """Model config with vocabulary and head derived from the task when left at their defaults."""
    cfg, task = rc.model, rc.task
    given = rc.raw.get("model", {})
    kw = {}
    if "vocab_size" not in given:
        kw["vocab_size"] = task.vocab_size
    if "head" not in given:
        kw["head"] = "token" if task.token_level else "pooled"
    if "num_classes" not in given and not task.token_level:
        kw["num_classes"] = task.num_classes
    if "max_len" not in given:
        unit = 2 ** (cfg.levels - 1)
        kw["max_len"] = max(cfg.max_len, -(-max(task.seq_len, task.pad_to) // unit) * unit)
    return cfg.replace(**kw) if kw else cfg


def _corpus(rc, args):
    if rc.task.kind != "char_lm":
        return None
    return load_corpus(getattr(args, "corpus", None) or rc.task.corpus or None)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    rc = load_run_config(args.config, args.override, args.seed)
    cfg = _model_config(rc)
    os.makedirs(args.out, exist_ok=True)
    model = HrtModel(cfg)
    report, _ = train(model, rc.task, rc.training, _corpus(rc, args), log=None if args.quiet else print)
    save_checkpoint(os.path.join(args.out, "checkpoint.hrt"), model)
    report.write_csv(os.path.join(args.out, "train.csv"))
    report.write_summary(os.path.join(args.out, "summary.json"))
    _write_json(os.path.join(args.out, "config.json"), rc.to_dict() | {"model": cfg.to_dict()})
    write_run_json(args.out, "train", rc, [args.config] if args.config else [])
    return EXIT_OK


def _check_expected(rc, cfg, path):
    """Load ``path``; when the config file has a model section it must match the checkpoint's."""
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path, cfg if "model" in rc.raw else None)


def cmd_eval(args):
    rc = load_run_config(args.config, args.override, args.seed)
    model = _check_expected(rc, _model_config(rc), args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    metrics = evaluate(model, rc.task, args.split, rc.training.eval_batches, _corpus(rc, args))
    metrics["split"] = args.split
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    write_run_json(args.out, "eval", rc, [p for p in (args.config, args.checkpoint) if p])
    if not args.quiet:
        print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_bench(args):
    rc = load_run_config(args.config, args.override, args.seed)
    bc = rc.bench
    n_list = [int(x) for x in args.n_list.split(",")] if args.n_list else bc.n_list
    os.makedirs(args.out, exist_ok=True)

    def family(n):
        return B.hrt_family(n, bc.d1, bc.heads, bc.blocks, bc.vocab_size)

    curve = B.scaling_experiment(n_list, family, bc.batch, bc.meta)
    curve.write_csv(os.path.join(args.out, "scaling.csv"))
    checks = B.scaling_checks(curve)
    extra = {"rho": curve.rho}

    nes_rows = []
    if bc.nes:
        nes_rows = _nes_runs(rc, bc, family)
        hrt = next(r for r in nes_rows if r["model"] == "hrt")
        flat = next(r for r in nes_rows if r["model"] == "flat")
        checks["nes_hrt_gt_flat"] = {"passed": hrt["nes"] > flat["nes"], "hrt": hrt["nes"], "flat": flat["nes"]}
    B.write_rows(os.path.join(args.out, "nes.csv"), B.NES_FIELDS, nes_rows)

    if args.ablation or bc.ablation:
        rows = B.ablation_grid(_model_config(rc), rc.task, rc.training, corpus=_corpus(rc, args),
                               log=None if args.quiet else print)
        B.write_rows(os.path.join(args.out, "ablation.csv"), B.ABLATION_FIELDS, rows)
        extra["ablation"] = rows

    doc = B.write_summary(os.path.join(args.out, "summary.json"), checks, extra)
    write_run_json(args.out, "bench", rc, [args.config] if args.config else [])
    if not args.quiet:
        for name, c in checks.items():
            print(f"{'SKIP' if c.get('skipped') else 'PASS' if c['passed'] else 'FAIL'} {name}")
    return EXIT_OK if doc["passed"] else EXIT_GATED


def _nes_runs(rc, bc, family):
    """Train HRT and its param-matched flat baseline on listops_mini in an ``nes_n`` window with the training budget."""
    task = TaskSpec(kind="listops_mini", seq_len=min(bc.nes_n, 128), pad_to=bc.nes_n, batch_size=rc.task.batch_size,
                    seeds=rc.task.seeds)
    hcfg = family(bc.nes_n).replace(vocab_size=task.vocab_size, head="pooled", num_classes=task.num_classes,
                                    seed=rc.model.seed)
    fcfg, _ = B.flat_family(hcfg)
    out = []
    for tag, cfg in (("hrt", hcfg), ("flat", fcfg)):
        model = HrtModel(cfg)
        report, _ = train(model, task, rc.training)
        flops = B.measure(cfg, bc.nes_n, 1, meta=True, model=model).total_flops
        out.append((tag, task.kind, bc.nes_n, report.final_metrics["accuracy"], flops))
    return B.nes_rows(out)


def _input_tokens(rc, args, cfg):
    if args.text is not None:
        if cfg.vocab_size == CHAR_VOCAB:
            ids = [b + BYTE_OFFSET for b in args.text.encode("utf-8")]
        else:
            try:
                ids = [int(t) for t in args.text.split()]
            except ValueError:
                raise ConfigError("--text must be space-separated token ids for a non-byte vocabulary") from None
        if not ids:
            raise ConfigError("--text is empty")
        return np.asarray([ids], dtype=np.int64)
    batch = make_batch(rc.task, args.split, 0, _corpus(rc, args), batch_size=1)
    return batch.tokens


def _write_matrix(path, w):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([f"k{j}" for j in range(w.shape[1])])
        for row in w:
            wr.writerow([repr(float(v)) for v in row])


def cmd_dump_attention(args):
    rc = load_run_config(args.config, args.override, args.seed)
    model = _check_expected(rc, _model_config(rc), args.checkpoint)
    tokens = _input_tokens(rc, args, model.config)
    os.makedirs(args.out, exist_ok=True)
    with E.no_grad(), record_attention() as records:
        out = model.forward(tokens)

    # one map per (level, head) and per (transition, direction, head); the last block of a level wins
    latest = {}
    for r in records:
        if r.item != 0:
            continue
        key = ("self", r.level, r.head) if r.kind == "self" else (r.kind, r.level, r.head)
        latest[key] = r
    manifest = {"self": [], "cross": [], "pyramid": [], "tokens": tokens[0].tolist()}
    for key in sorted(latest, key=lambda k: (k[0] != "self", k[1], k[0], k[2])):
        r = latest[key]
        if r.kind == "self":
            name = f"self_level{r.level}_head{r.head}.csv"
            manifest["self"].append({"file": name, "level": r.level, "head": r.head, "shape": list(r.weights.shape)})
        else:
            name = f"cross_{r.level}to{r.coarse_level}_{r.kind}_head{r.head}.csv"
            manifest["cross"].append({"file": name, "fine_level": r.level, "coarse_level": r.coarse_level,
                                      "direction": "bottom_up" if r.kind == "up" else "top_down",
                                      "head": r.head, "shape": list(r.weights.shape)})
        _write_matrix(os.path.join(args.out, name), r.weights)
    for name, lv in zip(out.pyramid.dump_csv(args.out), out.pyramid.levels):
        manifest["pyramid"].append({"file": name, "length": lv.length, "dim": lv.dim})
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    write_run_json(args.out, "dump-attention", rc, [p for p in (args.config, args.checkpoint) if p],
                   {"text": args.text})
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hrt", description="Hierarchical resolution transformer toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with model/task/training/bench sections")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="model seed (overrides model.seed)")
        sp.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--corpus", help="byte corpus for char_lm (default: $HRT_CORPUS or the built-in corpus)")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="scaling curves, gated checks and the ablation grid")
    common(sp)
    sp.add_argument("--n-list", help="comma-separated sequence lengths")
    sp.add_argument("--ablation", action="store_true", help="also run the ablation grid")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("dump-attention", help="write attention maps and pyramid snapshots as CSV")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--text", help="input text (byte models) or space-separated ids")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (HrtError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
