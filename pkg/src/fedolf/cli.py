"""Command-line runner: ``fedolf {run,memory-report,toa-bench,partition} --config FILE``.

Every key of the YAML config is optional; the resolved configuration with
all defaults filled in (except ``out_dir``) is echoed to
``config_resolved.yaml`` in the output directory. Unknown keys are rejected
before any computation.

Output files (CSV, header row, floats at 9 significant digits, trailing newline):

  run            metrics.csv        round,accuracy,loss,bytes_down,bytes_up,flops,joules_cum
                 memory_report.csv  client_id,l_k,mode,mem_bytes,flops_f,flops_b,bytes_down,bytes_up,joules
                 diagnostics.csv    l_k,L_hat,gamma_hat,D_hat,eta,epsilon,regime
  memory-report  memory_sweep.csv   l_k,ordered_bytes,random_worst_case_bytes
  toa-bench      toa_bench.csv      method,s,bits,frozen_bytes,bytes_down,bytes_up,accuracy,budget_gap
  partition      manifest.csv       client_id,sample_index

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .costmodel import ORDERED, RANDOM_WORST_CASE, EnergyParams, theoretical_memory
from .data import PartitionedDataset, load_csv, make_federated, synth_blobs, write_manifest
from .diagnostics import diagnostics_table
from .federation import FedConfig, RoundHistory, assign_capacity_clusters, run_federated
from .nn import ArchitectureSpec, build_model
from .toa import ToaConfig, qsgd_payload_bytes, sparsify_frozen_stack, stack_bytes

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# Desk-scale defaults; a full-size study would use K=100, 10 participants, T=500, E=5.
DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "out",
    "data": {
        "source": "synthetic",  # or "csv"
        "path": None,
        "class_count": None,
        "n": 2000,
        "d": 16,
        "classes": 4,
        "spread": 1.0,
        "partition": "dirichlet",  # or "iid"
        "alpha": 0.1,
        "holdout_fraction": 0.2,
    },
    "architecture": {"preset": "mlp", "sizes": [16, 128, 128, 128, 128, 4]},
    "federation": {
        "K": 10,
        "participants_per_round": 5,
        "T": 50,
        "E": 2,
        "eta": 0.03,
        "batch_size": 16,
        "clusters": 5,
        "freeze_levels": [4, 3, 2, 1, 0],
        "strategy": "fedolf",
    },
    "toa": None,  # e.g. {s: 0.75, rng_seed: 0, weighting: norm}
    "qsgd_bits": None,
    "energy": {"joules_per_gflop": 1.0, "joules_per_megabyte": 0.5},
    "report": {"memory_batch": None, "L_trials": 5},
    "toa_bench": {"s_grid": [0.25, 0.5, 0.75, 1.0]},
}

TOA_KEYS = {"s": None, "rng_seed": 0, "weighting": "norm"}


class ConfigError(ValueError):
    pass


def _merge(defaults, given, path: str):
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if key == "architecture":
            out[key] = value  # validated by ArchitectureSpec
        elif key == "toa":
            out[key] = None if value is None else _merge(TOA_KEYS, value, where)
        elif isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value if value is not None else {}, where)
        else:
            out[key] = value
    return out


def resolve_config(raw: dict | None, seed: int | None = None, out: str | None = None) -> dict:
    cfg = _merge(DEFAULTS, raw or {}, "")
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out_dir"] = out
    return cfg


def read_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return raw if raw is not None else {}


@dataclass
class Experiment:
    cfg: dict
    arch: ArchitectureSpec
    fed: FedConfig
    data: PartitionedDataset

    @property
    def out_dir(self) -> Path:
        return Path(self.cfg["out_dir"])


def _typed(section: str, key: str, value, kind):
    try:
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {value!r}") from None


def build_experiment(cfg: dict) -> Experiment:
    """Validate everything and load the data; any problem is a :class:`ConfigError`."""
    seed = _typed("", "seed", cfg["seed"], int)
    try:
        arch = ArchitectureSpec.from_config(cfg["architecture"])
        build_model(arch, 0)  # shape-check the layer chain now
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"architecture: {exc}") from None

    f = cfg["federation"]
    ints = {k: _typed("federation", k, f[k], int)
            for k in ("K", "participants_per_round", "T", "E", "batch_size", "clusters")}
    toa = None
    if cfg["toa"] is not None:
        t = cfg["toa"]
        if t["s"] is None:
            raise ConfigError("toa.s is required when toa is given")
        try:
            toa = ToaConfig(_typed("toa", "s", t["s"], float), _typed("toa", "rng_seed", t["rng_seed"], int),
                            t["weighting"])
        except ValueError as exc:
            raise ConfigError(f"toa: {exc}") from None
    e = cfg["energy"]
    try:
        energy = EnergyParams(_typed("energy", "joules_per_gflop", e["joules_per_gflop"], float),
                              _typed("energy", "joules_per_megabyte", e["joules_per_megabyte"], float))
        qsgd = None if cfg["qsgd_bits"] is None else _typed("", "qsgd_bits", cfg["qsgd_bits"], int)
        levels = [_typed("federation", "freeze_levels", v, int) for v in f["freeze_levels"]]
        fed = FedConfig(eta=_typed("federation", "eta", f["eta"], float), freeze_levels=levels,
                        strategy=f["strategy"], toa=toa, qsgd_bits=qsgd, seed=seed, energy=energy, **ints)
    except ValueError as exc:
        raise ConfigError(f"federation: {exc}") from None
    n_units = len(arch.layers)
    if max(fed.freeze_levels) >= n_units:
        raise ConfigError(f"federation.freeze_levels: level {max(fed.freeze_levels)} "
                          f"leaves no trainable unit of {n_units}")
    if qsgd is not None and not 1 <= qsgd <= 16:
        raise ConfigError("qsgd_bits: must lie in 1..16")

    report = cfg["report"]
    if report["memory_batch"] is not None:
        _typed("report", "memory_batch", report["memory_batch"], int)
    if _typed("report", "L_trials", report["L_trials"], int) < 1:
        raise ConfigError("report.L_trials: must be at least 1")
    grid = cfg["toa_bench"]["s_grid"]
    if (not isinstance(grid, list) or not grid
            or any(not 0 < _typed("toa_bench", "s_grid", s, float) <= 1 for s in grid)):
        raise ConfigError("toa_bench.s_grid: a non-empty list of values in (0, 1]")

    return Experiment(cfg, arch, fed, _load_data(cfg["data"], seed, fed.K, arch))


def _load_data(d: dict, seed: int, K: int, arch: ArchitectureSpec) -> PartitionedDataset:
    try:
        if d["source"] == "synthetic":
            shard = synth_blobs(_typed("data", "n", d["n"], int), _typed("data", "d", d["d"], int),
                                _typed("data", "classes", d["classes"], int),
                                _typed("data", "spread", d["spread"], float), seed)
        elif d["source"] == "csv":
            if d["path"] is None or d["class_count"] is None:
                raise ConfigError("data.path and data.class_count are required for csv data")
            shard = load_csv(d["path"], _typed("data", "class_count", d["class_count"], int))
        else:
            raise ConfigError(f"data.source: unknown source {d['source']!r}")
        features = int(np.prod(shard.features.shape[1:]))
        if features != int(np.prod(arch.input_shape)):
            raise ConfigError(f"data: {features} features per sample but the architecture "
                              f"expects input {arch.input_shape}")
        return make_federated(shard, K, d["partition"], _typed("data", "alpha", d["alpha"], float),
                              seed, _typed("data", "holdout_fraction", d["holdout_fraction"], float))
    except ConfigError:
        raise
    except (OSError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None


# -- output -----------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format(float(v), ".9g")
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_resolved(exp_cfg: dict, out: Path) -> None:
    # the output location is left out so reruns elsewhere stay byte-identical
    echo = {k: v for k, v in exp_cfg.items() if k != "out_dir"}
    text = yaml.safe_dump(echo, sort_keys=True, default_flow_style=None)
    (out / "config_resolved.yaml").write_text(text, encoding="utf-8")


def metrics_rows(history: RoundHistory):
    cum = 0.0
    for r in history.rounds:
        cum += r.joules
        yield (r.round, r.accuracy, r.loss, r.bytes_down, r.bytes_up, r.flops, cum)


def memory_rows(exp: Experiment, history: RoundHistory):
    mode = "random_draw" if exp.fed.strategy == "random_freeze" else ORDERED
    model = build_model(exp.arch, exp.fed.seed)
    for c in history.clients:
        es = [e for e in history.ledger.entries if e.client_id == c.id]
        mem = max((e.mem_bytes_theoretical for e in es),
                  default=theoretical_memory(model, c.l_k, exp.fed.batch_size, ORDERED))
        yield (c.id, c.l_k, mode, mem, sum(e.flops_forward for e in es), sum(e.flops_backward for e in es),
               sum(e.bytes_down for e in es), sum(e.bytes_up for e in es),
               sum(e.energy_joules_modeled for e in es))


def cmd_run(exp: Experiment) -> None:
    out = exp.out_dir
    history = run_federated(exp.fed, exp.data, exp.arch)
    write_csv(out / "metrics.csv", ["round", "accuracy", "loss", "bytes_down", "bytes_up", "flops", "joules_cum"],
              metrics_rows(history))
    write_csv(out / "memory_report.csv",
              ["client_id", "l_k", "mode", "mem_bytes", "flops_f", "flops_b", "bytes_down", "bytes_up", "joules"],
              memory_rows(exp, history))
    rows = diagnostics_table(history.model, history.clients, exp.fed.freeze_levels, exp.fed.eta,
                             int(exp.cfg["report"]["L_trials"]), exp.fed.seed)
    cols = ["l_k", "L_hat", "gamma_hat", "D_hat", "eta", "epsilon", "regime"]
    write_csv(out / "diagnostics.csv", cols, ([r[c] for c in cols] for r in rows))


def memory_sweep(arch: ArchitectureSpec, batch: int, seed: int = 0):
    model = build_model(arch, seed)
    for l_k in range(model.n_layers):
        yield (l_k, theoretical_memory(model, l_k, batch, ORDERED),
               theoretical_memory(model, l_k, batch, RANDOM_WORST_CASE))


def cmd_memory_report(exp: Experiment) -> None:
    batch = exp.cfg["report"]["memory_batch"] or exp.fed.batch_size
    write_csv(exp.out_dir / "memory_sweep.csv", ["l_k", "ordered_bytes", "random_worst_case_bytes"],
              memory_sweep(exp.arch, int(batch), exp.fed.seed))


def frozen_budget(exp: Experiment, s: float) -> tuple[int, list]:
    """TOA frozen-stack bytes summed over every client, and the stacks themselves."""
    model = build_model(exp.arch, exp.fed.seed)
    levels = assign_capacity_clusters(exp.fed.K, exp.fed.clusters, exp.fed.freeze_levels, exp.fed.seed)
    total, stacks = 0, []
    for cid, l_k in enumerate(levels):
        frozen = model.layers[:l_k]
        if l_k < 2:
            continue
        stacks.append(frozen)
        if s < 1:
            total += stack_bytes(sparsify_frozen_stack(frozen, ToaConfig(s, cid)).layers)
        else:
            total += stack_bytes(frozen)
    return total, stacks


def matched_bits(target: int, stacks) -> tuple[int, int]:
    arrays = [p for stack in stacks for layer in stack for p in layer.params]
    best = None
    for bits in range(1, 17):
        payload = sum(qsgd_payload_bytes(p.size, bits) if np.any(p) else 4 for p in arrays)
        if best is None or abs(payload - target) < abs(best[1] - target):
            best = (bits, payload)
    return best


def cmd_toa_bench(exp: Experiment) -> None:
    rows = []
    base = exp.fed
    for s in [float(v) for v in exp.cfg["toa_bench"]["s_grid"]]:
        toa = None if s >= 1 else ToaConfig(s, base.toa.rng_seed if base.toa else 0,
                                            base.toa.weighting if base.toa else "norm")
        budget, stacks = frozen_budget(exp, s)
        fed = FedConfig(**{**vars(base), "toa": toa, "qsgd_bits": None})
        h = run_federated(fed, exp.data, exp.arch)
        rows.append(("toa", s, "", budget, sum(r.bytes_down for r in h.rounds),
                     sum(r.bytes_up for r in h.rounds), h.rounds[-1].accuracy if h.rounds else float("nan"), 0.0))
        if s < 1 and stacks:
            bits, payload = matched_bits(budget, stacks)
            fed = FedConfig(**{**vars(base), "toa": None, "qsgd_bits": bits})
            h = run_federated(fed, exp.data, exp.arch)
            rows.append(("qsgd", s, bits, payload, sum(r.bytes_down for r in h.rounds),
                         sum(r.bytes_up for r in h.rounds), h.rounds[-1].accuracy if h.rounds else float("nan"),
                         (payload - budget) / budget))
    write_csv(exp.out_dir / "toa_bench.csv",
              ["method", "s", "bits", "frozen_bytes", "bytes_down", "bytes_up", "accuracy", "budget_gap"], rows)


def cmd_partition(exp: Experiment) -> None:
    write_manifest(exp.data, exp.out_dir / "manifest.csv")


COMMANDS = {"run": cmd_run, "memory-report": cmd_memory_report, "toa-bench": cmd_toa_bench,
            "partition": cmd_partition}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedolf", description="Federated learning with ordered layer freezing.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment configuration")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(read_config(args.config), args.seed, args.out)
        exp = build_experiment(cfg)
        out = exp.out_dir
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        write_resolved(cfg, out)
        COMMANDS[args.command](exp)
    except Exception as exc:  # anything after validation is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
