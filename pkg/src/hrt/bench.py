"""Closed-form cost model, instrumented measurements, scaling and ablation experiments.

The closed form in :func:`analytic_cost` follows the counting rules of
:mod:`hrt.ledger` op by op, so it must agree with an instrumented forward pass
exactly. Per block at a level of length ``s`` and width ``d`` (batch ``B``,
``h`` heads, FFN ratio ``r``)::

    attn_scores    2 B s^2 d          attn_mix   2 B s^2 d
    projections    8 B s d^2          ffn        4 r B s d^2
    normalization  10 B s d + 5 B h s^2

so the self-attention part per level is ``4 s^2 d`` per block and item, and
the total over levels is ``sum_l 4 (n / 2**(l-1))**2 d_l``.
"""
import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .config import HrtConfig, default_dims
from .errors import CapacityError, ConfigError, DivergenceError, HrtError, InputError
from .ledger import CATEGORIES, CostLedger
from .model import HrtModel, match_flat_config, param_count

ATTENTION = ("attn_scores", "attn_mix")
DEFAULT_N_LIST = (256, 512, 1024, 2048, 4096, 8192)
RHO_GATE = 2.5
RHO_TREND_GATE = 2.6
MEMORY_GATE = 0.6
MEMORY_N = 4096
CROSSOVER_GATE = 512
PARAM_TOLERANCE = 0.10


# ---------------------------------------------------------------------------
# closed form
# ---------------------------------------------------------------------------

def analytic_cost(config: HrtConfig, n, batch=1):
    """FLOPs of one forward pass at padded length ``n``, keyed by (category, level).

    Level 0 holds the output head; levels are 1-based otherwise.
    """
    c = config
    L, dims, h, r = c.levels, c.dims, c.heads, c.ffn_ratio
    if n % 2 ** (L - 1):
        raise InputError(f"n={n} is not a multiple of 2**(levels-1)={2 ** (L - 1)}")
    B = batch
    out = {}

    def put(cat, level, v):
        if v:
            out[(cat, level)] = out.get((cat, level), 0) + int(v)

    for i in range(L):
        s, d, lv = n // 2 ** i, dims[i], i + 1
        nb = c.blocks_at(i)
        put("attn_scores", lv, nb * 2 * B * s * s * d)
        put("attn_mix", lv, nb * 2 * B * s * s * d)
        put("projections", lv, nb * 8 * B * s * d * d)
        put("ffn", lv, nb * 4 * r * B * s * d * d)
        put("normalization", lv, nb * (10 * B * s * d + 5 * B * h * s * s))
        if i == L - 1:
            break
        dc = dims[i + 1]
        fan = 2 * d if c.reduction == "linear_strided" else d
        put("reduction", lv, 2 * B * (s // 2) * fan * dc)
        if c.cross_resolution:
            put("cross_res", lv, _cross_cost(B, s, d, dc, c.cross_heads, c.gate))
    for i in range(L - 1):
        s, d, dc = n // 2 ** i, dims[i], dims[i + 1]
        v = 2 * B * (s // 2) * dc * d
        if c.reduction == "wavelet":
            v += 2 * B * (s // 2) * d * d
        put("reconstruction", i + 1, v)
    if c.head == "token":
        put("head", 0, 5 * B * n * dims[0] + 2 * B * n * dims[0] * c.vocab_size)
    elif c.head == "pooled":
        put("head", 0, 5 * B * c.d_out + 2 * B * c.d_out * c.num_classes)
    return out


def _cross_cost(B, s, df, dc, hc, gate):
    sc, da = s // 2, min(df, dc)
    # per path: q, k and v maps, scores and mix, softmax, output map
    # bottom-up: coarse queries over fine keys
    up = 2 * sc * dc * da + 2 * 2 * s * df * da + 2 * 2 * sc * s * da + 5 * hc * sc * s + 2 * sc * da * dc
    # top-down: fine queries over coarse keys
    down = 2 * s * df * da + 2 * 2 * sc * dc * da + 2 * 2 * s * sc * da + 5 * hc * s * sc + 2 * s * da * df
    gates = 0
    if gate != "global":
        gates = 2 * s * 2 * df * (1 if gate == "position" else df) + 2 * sc * 2 * dc * (1 if gate == "position" else dc)
    return B * (up + down + gates)


def by_category(costs):
    out = {c: 0 for c in CATEGORIES}
    for (c, _), v in costs.items():
        out[c] += v
    return out


def attention_flops(costs):
    return sum(v for (c, _), v in costs.items() if c in ATTENTION)


# ---------------------------------------------------------------------------
# instrumented measurement
# ---------------------------------------------------------------------------

@dataclass
class Measurement:
    flops: dict
    peak_live_floats: int
    peak_live_floats_inference: int
    params: int
    wall_time: float = 0.0

    @property
    def total_flops(self):
        return sum(self.flops.values())

    @property
    def attention_flops(self):
        return attention_flops(self.flops)


def _tokens(config, n, batch):
    # id 1 everywhere: never padding, valid for any vocabulary
    return np.ones((batch, n), dtype=np.int64)


def instrumented_forward(model, n, batch=1, meta=True, retain_graph=True):
    """Run one forward pass under a fresh ledger; returns (ledger, seconds).

    With ``retain_graph`` the pass builds the autodiff graph as during training,
    so every intermediate saved for backward stays live until the pass ends.
    ``meta`` propagates shapes only, which makes very long inputs affordable.
    """
    ledger = CostLedger()
    tokens = _tokens(model.config, n, batch)
    grad_ctx = _null() if retain_graph else E.no_grad()
    meta_ctx = E.meta_mode() if meta else _null()
    t0 = time.perf_counter()
    with meta_ctx, grad_ctx, E.instrument(ledger):
        out = model.forward(tokens)
        del out
    return ledger, time.perf_counter() - t0


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def measure(config, n, batch=1, meta=True, model=None):
    """FLOPs plus peak live floats (parameters included) for training-mode and inference-mode forwards."""
    model = model or HrtModel(config)
    params = model.num_params()
    train_ledger, seconds = instrumented_forward(model, n, batch, meta, retain_graph=True)
    infer_ledger, _ = instrumented_forward(model, n, batch, meta, retain_graph=False)
    return Measurement(
        flops=dict(train_ledger.flops),
        peak_live_floats=params + train_ledger.peak_live_floats,
        peak_live_floats_inference=params + infer_ledger.peak_live_floats,
        params=params,
        wall_time=0.0 if meta else seconds,
    )


# ---------------------------------------------------------------------------
# scaling experiment
# ---------------------------------------------------------------------------

def hrt_family(n, d1=16, heads=4, blocks=2, vocab_size=16, cap_factor=4):
    """HRT config for length ``n``: levels = log2(n) - 2, capped doubling widths."""
    levels = max(1, int(math.log2(n)) - 2)
    return HrtConfig(vocab_size=vocab_size, max_len=n, levels=levels, dims=default_dims(d1, levels, cap_factor),
                     heads=heads, blocks_per_level=blocks, dropout=0.0)


def flat_family(hrt_config, tolerance=PARAM_TOLERANCE):
    """Param-matched single-resolution baseline; returns (config, param ratio)."""
    return match_flat_config(hrt_config, tolerance=tolerance)


SCALING_FIELDS = ("n", "model", "levels", "dims", "depth", "params", "param_ratio", "flops_total",
                  "flops_attention", "peak_live_floats", "peak_live_floats_inference", "wall_time", "status")


@dataclass
class ScalingCurve:
    rows: list = field(default_factory=list)
    rho: dict = field(default_factory=dict)     # model tag -> {metric -> {n: ratio}}

    def tagged(self, tag):
        return [r for r in self.rows if r["model"] == tag and r["status"] == "ok"]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCALING_FIELDS)
            for r in self.rows:
                w.writerow([_cell(r[k]) for k in SCALING_FIELDS])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def growth_ratios(values):
    """rho(n) = value(2n) / value(n) for every n whose double is present."""
    return {n: values[2 * n] / values[n] for n in sorted(values) if 2 * n in values and values[n]}


def _row(n, tag, cfg, m, ratio, status="ok"):
    return {
        "n": n, "model": tag, "levels": cfg.levels, "dims": list(cfg.dims), "depth": cfg.blocks_per_level,
        "params": m.params if m else param_count(cfg), "param_ratio": ratio,
        "flops_total": m.total_flops if m else 0, "flops_attention": m.attention_flops if m else 0,
        "peak_live_floats": m.peak_live_floats if m else 0,
        "peak_live_floats_inference": m.peak_live_floats_inference if m else 0,
        "wall_time": m.wall_time if m else 0.0, "status": status,
    }


def scaling_experiment(n_list=DEFAULT_N_LIST, family=hrt_family, batch=1, meta=True, max_n=None):
    """Measure HRT and its param-matched flat baseline at every n.

    HRT growth ratios follow the family (levels grow with n). The flat model
    matched at n is also evaluated at 2n, so its ratio compares one fixed
    architecture. Rows beyond ``max_n`` are emitted with a capacity status.
    """
    n_list = sorted(set(int(n) for n in n_list))
    curve = ScalingCurve()
    hrt_vals = {"flops_attention": {}, "flops_total": {}, "peak_live_floats": {}}
    flat_rho = {"flops_attention": {}, "flops_total": {}, "peak_live_floats": {}}
    for n in n_list:
        hcfg = family(n)
        try:
            if max_n is not None and n > max_n:
                raise CapacityError(f"n={n} exceeds the configured limit {max_n}")
            fcfg, ratio = flat_family(hcfg)
            fcfg = fcfg.replace(max_len=2 * n)
            hm = measure(hcfg, n, batch, meta)
            fmodel = HrtModel(fcfg)
            fm = measure(fcfg, n, batch, meta, fmodel)
        except (CapacityError, ConfigError) as e:
            curve.rows.append(_row(n, "hrt", hcfg, None, 0.0, f"error: {e}"))
            curve.rows.append(_row(n, "flat", hcfg.replace(levels=1, dims=[hcfg.dims[-1]]), None, 0.0, f"error: {e}"))
            continue
        curve.rows.append(_row(n, "hrt", hcfg, hm, 1.0))
        curve.rows.append(_row(n, "flat", fcfg, fm, ratio))
        hrt_vals["flops_attention"][n] = hm.attention_flops
        hrt_vals["flops_total"][n] = hm.total_flops
        hrt_vals["peak_live_floats"][n] = hm.peak_live_floats
        f2 = analytic_cost(fcfg, 2 * n, batch)
        f1 = fm.flops
        flat_rho["flops_attention"][n] = attention_flops(f2) / attention_flops(f1)
        flat_rho["flops_total"][n] = sum(f2.values()) / sum(f1.values())
    curve.rho["hrt"] = {k: growth_ratios(v) for k, v in hrt_vals.items()}
    curve.rho["flat"] = {k: v for k, v in flat_rho.items() if v}
    return curve


def scaling_checks(curve, rho_ns=(1024, 2048, 4096)):
    """Gated checks over a scaling curve; each value is a dict with ``passed`` and details."""
    checks = {}
    failed_rows = [r["n"] for r in curve.rows if r["status"] != "ok"]
    checks["all_rows_measured"] = {"passed": not failed_rows, "failing_n": sorted(set(failed_rows))}

    hr = curve.rho.get("hrt", {}).get("flops_attention", {})
    fr = curve.rho.get("flat", {}).get("flops_attention", {})
    checks["flat_attention_rho_is_4"] = {"passed": bool(fr) and all(v == 4.0 for v in fr.values()),
                                         "values": fr, "failing_n": [n for n, v in fr.items() if v != 4.0]}
    want = [n for n in rho_ns if n in hr]
    bad = [n for n in want if hr[n] > RHO_GATE]
    checks["hrt_attention_rho_le_2_5"] = {"passed": not bad, "skipped": not want,
                                          "values": {n: hr[n] for n in want}, "failing_n": bad}
    ns = sorted(hr)
    seq = [hr[n] for n in ns]
    windows = [ns[i:i + 3] for i in range(len(seq) - 2)]
    trend = any(seq[i + 1] < seq[i] and seq[i + 2] < seq[i + 1] and max(seq[i:i + 3]) < RHO_TREND_GATE
                for i in range(len(windows)))
    checks["hrt_attention_rho_decreasing_below_2_6"] = {
        "passed": trend or not windows, "skipped": not windows, "values": hr,
        "failing_n": [] if trend or not windows else [n for n, v in zip(ns, seq) if v >= RHO_TREND_GATE]}

    rows = {(r["n"], r["model"]): r for r in curve.rows if r["status"] == "ok"}
    if (MEMORY_N, "hrt") in rows and (MEMORY_N, "flat") in rows:
        ratio = rows[(MEMORY_N, "hrt")]["peak_live_floats"] / rows[(MEMORY_N, "flat")]["peak_live_floats"]
        checks["memory_ratio_le_0_6"] = {"passed": ratio <= MEMORY_GATE, "ratio": ratio,
                                         "failing_n": [] if ratio <= MEMORY_GATE else [MEMORY_N]}
    else:
        checks["memory_ratio_le_0_6"] = {"passed": True, "skipped": True}
    ns = sorted({n for n, _ in rows})
    cross = next((n for n in ns if (n, "flat") in rows and
                  rows[(n, "hrt")]["flops_total"] <= rows[(n, "flat")]["flops_total"]), None)
    small = [n for n in ns if n <= CROSSOVER_GATE]
    checks["flop_crossover_le_512"] = {"passed": not small or (cross is not None and cross <= CROSSOVER_GATE),
                                       "skipped": not small, "crossover_n": cross}
    mism = [n for (n, m), r in rows.items() if m == "flat" and abs(r["param_ratio"] - 1.0) > PARAM_TOLERANCE]
    checks["param_matched"] = {"passed": not mism, "failing_n": mism}
    return checks


# ---------------------------------------------------------------------------
# efficiency score
# ---------------------------------------------------------------------------

def nes(accuracy, cost):
    """Accuracy per GFLOP."""
    if not cost > 0:
        raise InputError(f"cost must be positive, got {cost}")
    return accuracy / (cost / 1e9)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

VARIANTS = ("full", "no_cross_resolution", "pooling_reduction", "shared_scale_modules",
            "only_fine", "only_coarse", "linear_reduction")


def variant_config(base: HrtConfig, name):
    L = base.levels
    if name == "full":
        return base
    if name == "no_cross_resolution":
        return base.replace(cross_resolution=False)
    if name == "pooling_reduction":
        return base.replace(reduction="avg_pool")
    if name == "shared_scale_modules":
        return base.replace(shared_scale_modules=True)
    if name == "only_fine":
        # single resolution at matched parameter count, the same baseline the scaling runs use
        return match_flat_config(base, tolerance=PARAM_TOLERANCE)[0]
    if name == "only_coarse":
        return base.replace(cross_resolution=False, level_blocks=[0] * (L - 1) + [base.blocks_at(L - 1)],
                            shared_scale_modules=False)
    if name == "linear_reduction":
        return base.replace(reduction="linear_strided")
    raise ConfigError(f"unknown ablation variant {name!r}")


ABLATION_FIELDS = ("variant", "status", "accuracy", "val_loss", "params", "flops", "peak_live_floats", "nes")


def ablation_grid(base: HrtConfig, spec, train_config, variants=VARIANTS, corpus=None, log=None):
    """Train every variant with identical seeds and budget; a failing variant becomes a failed row."""
    from .training import train

    rows = []
    for name in variants:
        row = {k: "" for k in ABLATION_FIELDS}
        row["variant"] = name
        try:
            cfg = variant_config(base, name)
            model = HrtModel(cfg)
            report, _ = train(model, spec, train_config, corpus)
            metrics = report.final_metrics
            n = _padded(cfg, spec.seq_len)
            m = measure(cfg, n, spec.batch_size, meta=True, model=model)
            row.update(status="ok", accuracy=metrics["accuracy"], val_loss=metrics["loss"], params=m.params,
                       flops=m.total_flops, peak_live_floats=m.peak_live_floats,
                       nes=nes(metrics["accuracy"], m.total_flops))
        except (HrtError, DivergenceError) as e:
            row["status"] = f"failed: {e}"
        if log:
            log(f"{name}: {row['status']} acc={row['accuracy']}")
        rows.append(row)
    return rows


def _padded(cfg, n_raw):
    unit = 2 ** (cfg.levels - 1)
    return -(-n_raw // unit) * unit


def nes_rows(results):
    """``results``: iterable of (model tag, task, n, accuracy, flops)."""
    return [{"model": t, "task": k, "n": n, "accuracy": a, "flops": f, "nes": nes(a, f)} for t, k, n, a, f in results]


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(r[k]) for k in fields])


NES_FIELDS = ("model", "task", "n", "accuracy", "flops", "nes")


def write_summary(path, checks, extra=None):
    doc = {"checks": _jsonable(checks), "passed": all(c["passed"] for c in checks.values())}
    if extra:
        doc.update(_jsonable(extra))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
