"""Command-line entry point: ``spinconv {gen-data,train,eval,relax,check}``.

Settings come from an optional JSON file (nested by section or flat with
dotted keys) and ``--set section.key=value`` overrides; values given with
``--set`` are parsed as JSON when possible, else taken as strings.
Exit status is 0 on success, 1 on a runtime failure and 2 on an invalid
configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checks import run_checks
from .data import (
    SPLIT_ID,
    OracleParams,
    dataset_statistics,
    generate_dataset,
    lj_energy_forces,
    read_dataset,
    write_dataset,
)
from .model import ModelConfig, SpinConvNet, load_checkpoint, make_batch, save_checkpoint
from .relax import RelaxConfig, relax_many, relaxation_metrics, write_trajectory
from .train import TrainConfig, baseline_metrics, evaluate, train

log = logging.getLogger("spinconv")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_structures: int = 2000
    atoms_min: int = 4
    atoms_max: int = 10
    species: list = field(default_factory=lambda: [1, 6])
    ood_fraction: float = 0.2
    noise: float = 0.08  # Å

    def validate(self) -> None:
        if self.n_structures < 1:
            raise ValueError("n_structures must be at least 1")
        if not 2 <= self.atoms_min <= self.atoms_max:
            raise ValueError("need 2 <= atoms_min <= atoms_max")
        if not 0.0 <= self.ood_fraction < 1.0:
            raise ValueError("ood_fraction must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class SplitConfig:
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    val_limit: int = 200  # structures scored at each validation

    def validate(self) -> None:
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1):
            raise ValueError("split fractions must lie in [0, 1)")
        if self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val_fraction + test_fraction must be below 1")


@dataclass
class RelaxRunConfig:
    max_iter: int = 200
    fmax: float = 0.05
    cap: float = 0.05
    step: float = 0.01
    n_structures: int = 50
    force_source: str = "model"  # model | oracle

    def validate(self) -> None:
        RelaxConfig(self.max_iter, self.fmax, self.cap, self.step)
        if self.n_structures < 1:
            raise ValueError("n_structures must be at least 1")
        if self.force_source not in ("model", "oracle"):
            raise ValueError("force_source must be 'model' or 'oracle'")


@dataclass
class PathsConfig:
    dataset: str = "dataset.jsonl"
    out_dir: str = "run"
    checkpoint: str = ""  # defaults to <out_dir>/checkpoint.json

    def validate(self) -> None:
        pass

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.json"


# Units and short descriptions shown by --help.
KEY_HELP = {
    "seed": "-, seeds data generation, initialisation and training",
    "data.n_structures": "count",
    "data.atoms_min": "atoms",
    "data.atoms_max": "atoms",
    "data.species": "atomic numbers (JSON list)",
    "data.ood_fraction": "fraction of heteronuclear pairs held out, and of structures tagged OOD",
    "data.noise": "Å, displacement std around relaxed clusters",
    "oracle.epsilon": "eV per species (JSON object)",
    "oracle.sigma": "Å per species (JSON object)",
    "oracle.cutoff": "Å",
    "oracle.taper": "Å, width of the smooth cutoff",
    "model.species": "atomic numbers (JSON list)",
    "model.m": "message size",
    "model.k": "message layers",
    "model.d": "hidden size",
    "model.b": "embedding experts",
    "model.n_lat": "latitude grid nodes",
    "model.n_lon": "longitude grid cells",
    "model.cutoff": "Å, neighbor cutoff",
    "model.max_neighbors": "count",
    "model.n_basis": "Gaussian basis functions",
    "model.variant": "energy-centric | force-centric",
    "model.rotation_samples": "random rotations averaged at inference",
    "train.batch_size": "structures per step",
    "train.energy_weight": "-, L1 weight of energies (eV)",
    "train.force_weight": "-, L1 weight of forces (eV/Å)",
    "train.lr": "initial learning rate",
    "train.decay": "-, plateau multiplier in (0, 1)",
    "train.patience": "validation rounds",
    "train.eval_every": "steps",
    "train.max_steps": "steps",
    "train.force_only": "bool, drop the energy loss",
    "train.train_rotations": "rotations per training step (0: model.rotation_samples)",
    "train.checkpoint_every": "steps (0: final checkpoint only)",
    "train.hvp_step": "Å, energy-centric force-loss difference step",
    "split.val_fraction": "fraction of ID structures",
    "split.test_fraction": "fraction of ID structures",
    "split.val_limit": "structures scored per validation",
    "relax.max_iter": "iterations",
    "relax.fmax": "eV/Å, convergence threshold on the largest atom force",
    "relax.cap": "Å, per-atom displacement cap per step",
    "relax.step": "Å²/eV, steepest-descent step",
    "relax.n_structures": "count, taken from the dataset's ID split",
    "relax.force_source": "model | oracle",
    "paths.dataset": "path to the JSONL dataset",
    "paths.out_dir": "directory for metrics, checkpoints and trajectories",
    "paths.checkpoint": "path (default <out_dir>/checkpoint.json)",
}

SECTIONS = {
    "data": DataConfig,
    "oracle": OracleParams,
    "model": ModelConfig,
    "train": TrainConfig,
    "split": SplitConfig,
    "relax": RelaxRunConfig,
    "paths": PathsConfig,
}
# fields that the top-level seed controls, or that are not user settings
HIDDEN = {"model.seed", "train.seed", "oracle.pair_overrides"}


def known_keys() -> list[str]:
    keys = ["seed"]
    for name in SECTIONS:
        for f in fields(SECTIONS[name]):
            key = f"{name}.{f.name}"
            if key not in HIDDEN:
                keys.append(key)
    return keys


@dataclass
class RunConfig:
    seed: int
    data: DataConfig
    oracle: OracleParams
    model: ModelConfig
    train: TrainConfig
    split: SplitConfig
    relax: RelaxRunConfig
    paths: PathsConfig

    def as_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: v for k, v in d.items() if f"{name}.{k}" not in HIDDEN}
        return out


def _flatten(obj: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in SECTIONS and not prefix:
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(file_values: dict, overrides: list[str]) -> RunConfig:
    """Merge file values and ``--set`` overrides, then validate every section."""
    flat = _flatten(file_values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        flat[key.strip()] = _parse_value(value.strip())
    valid = set(known_keys())
    unknown = sorted(set(flat) - valid)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)} (see --help)")
    seed = flat.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")
    sections = {}
    for name in SECTIONS:
        cls = SECTIONS[name]
        kwargs = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(name + ".")}
        if name in ("model", "train"):
            kwargs["seed"] = seed
        for f in fields(cls):
            if f.name in kwargs:
                kwargs[f.name] = _coerce(f"{name}.{f.name}", kwargs[f.name], f.type)
        try:
            obj = cls(**kwargs)
            if hasattr(obj, "validate"):
                obj.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
        sections[name] = obj
    return RunConfig(seed=seed, **sections)


def _coerce(key: str, value, annotation):
    """Check a JSON value against the field's declared type."""
    ann = str(annotation)
    if ann in ("int",):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif ann in ("float",):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif ann in ("bool",):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
    elif ann in ("str",):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif ann in ("list", "tuple"):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a JSON list, got {value!r}")
    elif ann == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a JSON object, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# subcommands


def _split_records(records, cfg: RunConfig):
    """Deterministic train/val/test partition of the ID records, with test indices."""
    ids = [i for i, r in enumerate(records) if r.split == SPLIT_ID]
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(ids))
    n_test = int(round(cfg.split.test_fraction * len(ids)))
    n_val = int(round(cfg.split.val_fraction * len(ids)))
    test = sorted(ids[i] for i in order[:n_test])
    val = sorted(ids[i] for i in order[n_test : n_test + n_val])
    train = sorted(ids[i] for i in order[n_test + n_val :])
    return train, val, test


def cmd_gen_data(cfg: RunConfig) -> int:
    d = cfg.data
    records = generate_dataset(
        d.n_structures,
        (d.atoms_min, d.atoms_max),
        d.species,
        seed=cfg.seed,
        ood_fraction=d.ood_fraction,
        oracle=cfg.oracle,
        noise=d.noise,
    )
    stats = dataset_statistics(records)
    meta = {"seed": cfg.seed, "data": asdict(d), "oracle": _oracle_json(cfg.oracle), "statistics": stats}
    path = Path(cfg.paths.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, records, meta)
    n_ood = sum(r.split != SPLIT_ID for r in records)
    print(f"wrote {len(records)} structures ({n_ood} OOD) to {path}")
    print(json.dumps(stats))
    return EXIT_OK


def _oracle_json(oracle: OracleParams) -> dict:
    return {
        "epsilon": {str(k): v for k, v in oracle.epsilon.items()},
        "sigma": {str(k): v for k, v in oracle.sigma.items()},
        "cutoff": oracle.cutoff,
        "taper": oracle.taper,
    }


def cmd_train(cfg: RunConfig) -> int:
    records = read_dataset(cfg.paths.dataset)
    train_idx, val_idx, test_idx = _split_records(records, cfg)
    if not train_idx:
        raise RuntimeError("no ID structures left for training")
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps({"train": train_idx, "val": val_idx, "test": test_idx}))
    (out / "config.json").write_text(json.dumps(cfg.as_dict(), indent=1, sort_keys=True))
    net = SpinConvNet(cfg.model)
    val = [records[i] for i in val_idx][: cfg.split.val_limit]
    result = train(net, [records[i] for i in train_idx], val, cfg.train, out_dir=out)
    if cfg.paths.checkpoint:
        save_checkpoint(net, cfg.paths.checkpoint_path(), {"step": result.steps})
    if result.final is not None:
        stats = dataset_statistics(records)
        base = baseline_metrics(stats, val)
        print(f"validation: {json.dumps(result.final.as_dict())}")
        print(f"median baseline: {json.dumps(base.as_dict())}")
    print(f"checkpoint: {cfg.paths.checkpoint_path()}")
    return EXIT_OK


def _eval_records(records, cfg: RunConfig):
    split_file = Path(cfg.paths.out_dir) / "split.json"
    if split_file.exists():
        idx = json.loads(split_file.read_text())["test"]
        if idx:
            return [records[i] for i in idx], "held-out ID test split"
    return [r for r in records if r.split == SPLIT_ID], "all ID structures"


def cmd_eval(cfg: RunConfig) -> int:
    records, header = read_dataset(cfg.paths.dataset, with_header=True)
    net = load_checkpoint(cfg.paths.checkpoint_path())
    stats = header.get("meta", {}).get("statistics") or dataset_statistics(records)
    subset, label = _eval_records(records, cfg)
    report = evaluate(net, subset)
    base = baseline_metrics(stats, subset)
    ood = [r for r in records if r.split != SPLIT_ID]
    out = {
        "subset": label,
        "n_structures": len(subset),
        "model": report.as_dict(),
        "median_baseline": base.as_dict(),
    }
    if ood:
        out["ood"] = evaluate(net, ood).as_dict()
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_relax(cfg: RunConfig) -> int:
    records = [r for r in read_dataset(cfg.paths.dataset) if r.split == SPLIT_ID]
    records = records[: cfg.relax.n_structures]
    systems = [r.system() for r in records]
    rc = RelaxConfig(cfg.relax.max_iter, cfg.relax.fmax, cfg.relax.cap, cfg.relax.step)

    def oracle_forces(batch):
        return [lj_energy_forces(s, cfg.oracle)[1] for s in batch]

    if cfg.relax.force_source == "oracle":
        force_fn = oracle_forces
    else:
        net = load_checkpoint(cfg.paths.checkpoint_path())
        force_fn = model_force_fn(net)
    trajs = relax_many(systems, force_fn, rc)
    reference = relax_many(systems, oracle_forces, rc)
    out = Path(cfg.paths.out_dir) / "relax"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "status", "n_steps", "final_max_force", "oracle_max_force"])
        for i, t in enumerate(trajs):
            write_trajectory(out / f"trajectory_{i:04d}.jsonl", t)
            f_oracle = lj_energy_forces(t.final, cfg.oracle)[1]
            fm = t.max_forces[-1] if t.max_forces else float("nan")
            writer.writerow([i, t.status, t.n_steps, repr(fm), repr(float(np.max(np.linalg.norm(f_oracle, axis=1))))])
    adwt, afbt = relaxation_metrics(
        [t.final for t in trajs], [t.final for t in reference], lambda s: oracle_forces([s])[0]
    )
    converged = sum(t.converged for t in trajs)
    summary = {"n_structures": len(trajs), "converged": converged, "adwt": adwt, "afbt": afbt}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return EXIT_OK


def model_force_fn(net: SpinConvNet, chunk: int = 64):
    """Batched force provider for :func:`relax_many` with the model's fixed rotations."""

    def forces(systems):
        out = []
        for start in range(0, len(systems), chunk):
            part = systems[start : start + chunk]
            batch = make_batch(part, net.config)
            _, f = net.forward(batch)
            out.extend(f.data[batch.system == i].copy() for i in range(len(part)))
        return out

    return forces


def cmd_check(cfg: RunConfig) -> int:
    results = run_checks(cfg.model, seed=cfg.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "relax": cmd_relax,
    "check": cmd_check,
}


def _keys_epilog() -> str:
    lines = ["config keys (section.key: unit or meaning, default):"]
    for key in known_keys():
        if key == "seed":
            default = 0
        else:
            section, attr = key.split(".", 1)
            default = getattr(SECTIONS[section](), attr)
        lines.append(f"  {key:26s} {KEY_HELP.get(key, '')} [default: {json.dumps(_jsonable(default))}]")
    return "\n".join(lines)


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, dict):
        return {str(k): v for k, v in value.items()}
    return value


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinconv",
        description="SpinConv graph network for energies and forces of small atomic systems.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="subcommand to run")
    parser.add_argument("--config", help="JSON file with settings")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one setting (repeatable)")
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    parser.add_argument("--threads", type=int, help="cap the BLAS/OpenMP worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        file_values = {}
        if args.config:
            try:
                file_values = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
            if not isinstance(file_values, dict):
                raise ConfigError("config file must hold a JSON object")
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = build_config(file_values, overrides)
    except ConfigError as exc:
        print(f"spinconv: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](cfg)
        return COMMANDS[args.command](cfg)
    except Exception as exc:  # reported, not re-raised: the exit code carries it
        log.debug("failure", exc_info=True)
        print(f"spinconv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
